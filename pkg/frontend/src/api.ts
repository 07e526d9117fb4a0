import type {
  Candidate,
  Envelope,
  EvidenceRecord,
  Note,
  Plan,
  Proposal,
  Rule,
  SessionDoc,
  Supervision,
} from "./types.js";

export type FetchLike = (
  url: string,
  init?: RequestInit,
) => Promise<Response>;

/** One entry of the recorded network log, body already parsed. */
export interface RecordedRequest {
  method: string;
  url: string;
  headers: Record<string, string>;
  body: unknown;
}

export class ApiError extends Error {
  constructor(
    message: string,
    readonly httpStatus: number,
    readonly kind: string,
  ) {
    super(message);
    this.name = "ApiError";
  }
}

export interface SessionSummary {
  id: string;
  state: string;
  created_at: string;
  last_seq: number;
  steps: number | null;
}

/**
 * Thin client over the local service. Every call is recorded in `log`
 * so tests can assert the exact request traffic a user action produced.
 * Plan edits are guarded by the server with an If-Match etag; the client
 * remembers the latest session etag and the event sequence it was
 * captured at, refreshing it with a read when events have moved on.
 */
export class ApiClient {
  readonly log: RecordedRequest[] = [];
  sessionEtag: string | null = null;
  sessionEtagSeq = -1;
  rulesEtag: string | null = null;

  constructor(
    readonly baseUrl: string,
    private readonly fetchImpl: FetchLike = (url, init) => fetch(url, init),
  ) {}

  private async request<T>(
    method: string,
    path: string,
    body?: unknown,
    headers: Record<string, string> = {},
  ): Promise<Envelope<T>> {
    const url = this.baseUrl + path;
    const init: RequestInit = { method, headers: { ...headers } };
    if (body !== undefined) {
      (init.headers as Record<string, string>)["content-type"] =
        "application/json";
      init.body = JSON.stringify(body);
    }
    this.log.push({
      method,
      url,
      headers: { ...(init.headers as Record<string, string>) },
      body: body === undefined ? null : JSON.parse(JSON.stringify(body)),
    });
    const response = await this.fetchImpl(url, init);
    const envelope = (await response.json()) as Envelope<T>;
    if (!response.ok || envelope.status !== "ok") {
      const detail = (envelope.payload as { error?: string })?.error;
      throw new ApiError(
        detail ?? `request failed: ${response.status}`,
        response.status,
        envelope.status ?? "error",
      );
    }
    return envelope;
  }

  private keepSessionEtag(envelope: Envelope<unknown>, seq: number): void {
    if (envelope.etag) {
      this.sessionEtag = envelope.etag;
      this.sessionEtagSeq = seq;
    }
  }

  async listSessions(): Promise<SessionSummary[]> {
    const env = await this.request<{ sessions: SessionSummary[] }>(
      "GET",
      "/sessions",
    );
    return env.payload.sessions;
  }

  async getSession(sid: string): Promise<{
    session: SessionDoc;
    plan: Plan | null;
    supervision: Supervision;
  }> {
    const env = await this.request<{
      session: SessionDoc;
      plan: Plan | null;
      supervision: Supervision;
    }>("GET", `/sessions/${sid}`);
    this.keepSessionEtag(env, env.payload.session.last_seq);
    return env.payload;
  }

  async getPlan(sid: string): Promise<Plan> {
    const env = await this.request<{ plan: Plan }>(
      "GET",
      `/sessions/${sid}/plan`,
    );
    return env.payload.plan;
  }

  /**
   * Apply one plan edit. `currentSeq` is the store's latest event
   * sequence; when the remembered etag predates it, the session is
   * re-read first so the edit carries a current If-Match value.
   */
  async editPlan(
    sid: string,
    edit: Record<string, unknown>,
    currentSeq: number,
  ): Promise<Plan> {
    if (this.sessionEtag === null || this.sessionEtagSeq !== currentSeq) {
      await this.getSession(sid);
    }
    const env = await this.request<{ plan: Plan }>(
      "PATCH",
      `/sessions/${sid}/plan`,
      edit,
      { "if-match": this.sessionEtag ?? "" },
    );
    this.keepSessionEtag(env, currentSeq + 1);
    return env.payload.plan;
  }

  async getEvidence(sid: string): Promise<EvidenceRecord[]> {
    const env = await this.request<{ evidence: EvidenceRecord[] }>(
      "GET",
      `/sessions/${sid}/evidence`,
    );
    return env.payload.evidence;
  }

  async postNote(
    sid: string,
    evidenceId: string,
    text: string,
  ): Promise<Note> {
    const env = await this.request<{ note: Note }>(
      "POST",
      `/sessions/${sid}/notes`,
      { evidence_id: evidenceId, text },
    );
    return env.payload.note;
  }

  async evolve(
    sid: string,
  ): Promise<{ proposals: Proposal[]; candidates: Candidate[] }> {
    const env = await this.request<{
      proposals: Proposal[];
      candidates: Candidate[];
    }>("POST", `/sessions/${sid}/evolve`, {});
    return env.payload;
  }

  async getProposals(
    sid: string,
  ): Promise<{ proposals: Proposal[]; candidates: Candidate[] }> {
    const env = await this.request<{
      proposals: Proposal[];
      candidates: Candidate[];
    }>("GET", `/sessions/${sid}/proposals`);
    return env.payload;
  }

  async decideProposal(
    pid: string,
    action: "accept" | "edit" | "reject",
    text?: string,
    sessionId?: string,
  ): Promise<{ rule: Rule | null }> {
    const body: Record<string, unknown> = { action };
    if (text !== undefined) body.text = text;
    if (sessionId !== undefined) body.session_id = sessionId;
    const env = await this.request<{ rule: Rule | null }>(
      "POST",
      `/proposals/${pid}/decision`,
      body,
    );
    return env.payload;
  }

  async decideCandidate(
    cid: string,
    action: "accept" | "reject",
    sessionId?: string,
  ): Promise<{ rule: Rule | null }> {
    const body: Record<string, unknown> = { action };
    if (sessionId !== undefined) body.session_id = sessionId;
    const env = await this.request<{ rule: Rule | null }>(
      "POST",
      `/proposals/${cid}/decision`,
      body,
    );
    return env.payload;
  }

  async getRules(): Promise<Record<string, Rule>> {
    const env = await this.request<{ rules: { rules: Record<string, Rule> } }>(
      "GET",
      "/rules",
    );
    this.rulesEtag = env.etag;
    return env.payload.rules.rules;
  }

  async importRules(text: string): Promise<{ imported: number; total: number }> {
    const headers: Record<string, string> = {};
    if (this.rulesEtag) headers["if-match"] = this.rulesEtag;
    const env = await this.request<{ imported: number; total: number }>(
      "POST",
      "/rules/import",
      { text },
      headers,
    );
    this.rulesEtag = env.etag;
    return env.payload;
  }
}
