import type { FetchLike } from "../src/api.js";
import type {
  Candidate,
  EvidenceRecord,
  Plan,
  PlanStep,
  Proposal,
  Rule,
  SessionDoc,
  StreamEvent,
  Supervision,
} from "../src/types.js";

export function makeDoc(overrides: Partial<SessionDoc> = {}): SessionDoc {
  return {
    schema_version: 1,
    id: "sess-test0001",
    state: "executing",
    ruleset_hash: "hash-0",
    created_at: "2026-08-15T10:00:00+00:00",
    enforce_gate: true,
    ingested_plan_hashes: [],
    gate_error_counts: {},
    last_event_at: null,
    last_seq: 0,
    ...overrides,
  };
}

export function makeStep(
  id: string,
  overrides: Partial<PlanStep> = {},
): PlanStep {
  return {
    id,
    title: `work on ${id}`,
    details: [],
    children: [],
    bindings: [],
    status: "pending",
    ...overrides,
  };
}

export function makePlan(steps: PlanStep[], overrides: Partial<Plan> = {}): Plan {
  return {
    schema_version: 1,
    id: "plan-test0001",
    source: "test",
    created_at: "2026-08-15T10:00:00+00:00",
    source_hash: "src-0",
    enriched: true,
    ruleset_hash: "hash-0",
    steps,
    ...overrides,
  };
}

export function makeRule(id: string, overrides: Partial<Rule> = {}): Rule {
  return {
    id,
    title: `rule ${id}`,
    description: `description for ${id}`,
    category: "general",
    enforcement_default: "non-strict",
    kind: "repo",
    confidence: 0.5,
    decay: 0.5,
    scope: "repo",
    origin: "imported",
    retired: false,
    versions: [
      {
        seq: 1,
        text: `description for ${id}`,
        cause: "imported",
        timestamp: "2026-08-15T10:00:00+00:00",
        provenance_note_ids: [],
      },
    ],
    ...overrides,
  };
}

export function makeEvidence(
  id: string,
  overrides: Partial<EvidenceRecord> = {},
): EvidenceRecord {
  return {
    schema_version: 1,
    id,
    session_id: "sess-test0001",
    step_id: "step-1",
    rule_id: "rule-a",
    level: "strict",
    summary: `proof ${id}`,
    artifacts: [],
    verified: true,
    advisory: false,
    submitted_at: "2026-08-15T10:00:00+00:00",
    test: null,
    warnings: [],
    event_seq: 1,
    ...overrides,
  };
}

export function makeProposal(
  id: string,
  overrides: Partial<Proposal> = {},
): Proposal {
  return {
    id,
    rule_id: "rule-a",
    current_text: "old text for the rule",
    proposed_text: "new text for the rule",
    source_note_ids: ["note-1"],
    status: "pending",
    ruleset_hash: "hash-0",
    low_coverage: false,
    ...overrides,
  };
}

export function makeCandidate(
  id: string,
  overrides: Partial<Candidate> = {},
): Candidate {
  return {
    id,
    suggested_title: "Default new categories to grey",
    suggested_text: "always default new categories to grey",
    trigger: { evidence_id: "ev-1", event_seq: 4 },
    status: "pending",
    ...overrides,
  };
}

export const SUPERVISION: Supervision = {
  summary: "1 of 4 steps complete",
  deviation: false,
  reason: null,
};

export function event(
  seq: number,
  type: string,
  data: Record<string, unknown>,
): StreamEvent {
  return { seq, at: `2026-08-15T10:00:${String(seq).padStart(2, "0")}+00:00`, type, data };
}

export interface SeenRequest {
  method: string;
  path: string;
  headers: Record<string, string>;
  body: unknown;
}

export type RouteHandler = (
  request: SeenRequest,
) => { status?: number; json: unknown } | Promise<{ status?: number; json: unknown }>;

export function okEnvelope(payload: unknown, etag: string | null = null) {
  return { status: "ok", payload, etag };
}

export function errorEnvelope(error: string, status: "error" | "conflict" = "error") {
  return { status, payload: { error }, etag: null };
}

/**
 * In-memory fetch double: routes by "METHOD /path" with the query
 * string stripped, recording every request it serves.
 */
export function fakeFetch(
  routes: Record<string, RouteHandler>,
): { fetch: FetchLike; seen: SeenRequest[] } {
  const seen: SeenRequest[] = [];
  const impl: FetchLike = async (url, init) => {
    const method = init?.method ?? "GET";
    const path = url.replace(/^https?:\/\/[^/]+/, "").split("?")[0];
    const headers: Record<string, string> = {};
    for (const [key, value] of Object.entries(init?.headers ?? {})) {
      headers[key.toLowerCase()] = value as string;
    }
    const body = init?.body ? JSON.parse(init.body as string) : null;
    const request: SeenRequest = { method, path, headers, body };
    seen.push(request);
    const handler =
      routes[`${method} ${path}`] ??
      Object.entries(routes).find(([key]) => {
        const [routeMethod, routePath] = key.split(" ");
        if (routeMethod !== method) return false;
        if (!routePath.includes("*")) return false;
        const pattern = new RegExp(
          "^" + routePath.replace(/[.+?^${}()|[\]\\]/g, "\\$&").replace(/\*/g, "[^/]+") + "$",
        );
        return pattern.test(path);
      })?.[1];
    if (!handler) {
      return new Response(JSON.stringify(errorEnvelope(`no route: ${method} ${path}`)), {
        status: 404,
        headers: { "content-type": "application/json" },
      });
    }
    const result = await handler(request);
    return new Response(JSON.stringify(result.json), {
      status: result.status ?? 200,
      headers: { "content-type": "application/json" },
    });
  };
  return { fetch: impl, seen };
}

export async function flushAsync(rounds = 6): Promise<void> {
  for (let i = 0; i < rounds; i += 1) {
    await new Promise((resolve) => setTimeout(resolve, 0));
  }
}
