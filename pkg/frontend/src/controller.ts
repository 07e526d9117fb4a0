import { ApiClient, ApiError } from "./api.js";
import type { SessionStore } from "./store.js";
import type { EnforcementLevel, StreamEvent } from "./types.js";
import type { PageUiState, Tab } from "./views/page.js";

/**
 * All user actions funnel through here. Each mutating action issues
 * exactly one write request; reads may follow to refresh projections
 * the event feed cannot reproduce locally (edited plans, rewritten rule
 * texts, supervision summaries). Nothing in this class decides gate
 * outcomes; it forwards the server's verdicts and errors to the view.
 *
 * Session state itself is rebuilt the same way the server rebuilds it:
 * by replaying the event feed from zero, so a page reload reproduces
 * the exact view from read endpoints alone.
 */
export class Controller {
  ui: PageUiState = {
    activeTab: "plan",
    connection: "connecting",
    rules: {},
    noteDrafts: {},
    refine: {
      open: false,
      index: 0,
      edits: {},
      decided: {},
      conflict: null,
      busy: false,
    },
    rulesUi: { importDraft: "", importError: null, importSummary: null },
    collapsed: {},
  };

  private refetching = {
    plan: { inFlight: false, dirty: false },
    rules: { inFlight: false, dirty: false },
    supervision: { inFlight: false, dirty: false },
  };

  constructor(
    private readonly client: ApiClient,
    readonly store: SessionStore,
    private readonly onChange: () => void,
  ) {}

  private get sid(): string {
    return this.store.state.sessionId;
  }

  /** Fetch what the event feed cannot carry; the feed replays the rest. */
  async bootstrap(): Promise<void> {
    const [base, rules] = await Promise.all([
      this.client.getSession(this.sid),
      this.client.getRules(),
    ]);
    this.store.state.supervision = base.supervision;
    this.ui.rules = rules;
    this.onChange();
  }

  handleStreamEvent(event: StreamEvent): void {
    const result = this.store.applyEvent(event);
    if (!result.applied) return;
    if (result.planStale) this.queueRefetch("plan");
    if (result.rulesChanged) this.queueRefetch("rules");
    if (SUPERVISION_EVENTS.has(event.type)) this.queueRefetch("supervision");
    this.onChange();
  }

  setConnection(status: PageUiState["connection"]): void {
    if (this.ui.connection !== status) {
      this.ui.connection = status;
      this.onChange();
    }
  }

  /** Coalesce refreshes: one request in flight, one more if events kept
   * arriving meanwhile, so the final fetch always sees the newest state. */
  private queueRefetch(kind: "plan" | "rules" | "supervision"): void {
    const slot = this.refetching[kind];
    if (slot.inFlight) {
      slot.dirty = true;
      return;
    }
    slot.inFlight = true;
    const run = async (): Promise<void> => {
      try {
        if (kind === "plan") {
          this.store.replacePlan(await this.client.getPlan(this.sid));
        } else if (kind === "rules") {
          this.ui.rules = await this.client.getRules();
        } else {
          const base = await this.client.getSession(this.sid);
          this.store.state.supervision = base.supervision;
        }
      } catch {
        // a failed refresh leaves the previous projection in place
      }
      if (slot.dirty) {
        slot.dirty = false;
        await run();
      }
    };
    void run().finally(() => {
      slot.inFlight = false;
      this.onChange();
    });
  }

  // -- plan actions

  async setLevel(
    stepId: string,
    ruleId: string,
    level: EnforcementLevel,
  ): Promise<void> {
    const plan = await this.client.editPlan(
      this.sid,
      { op: "set-binding-level", step_id: stepId, rule_id: ruleId, level },
      this.store.state.lastSeq,
    );
    this.store.replacePlan(plan);
    this.onChange();
  }

  // -- notes

  setNoteDraft(evidenceId: string, text: string): void {
    const draft = this.ui.noteDrafts[evidenceId] ?? {
      text: "",
      error: null,
      busy: false,
    };
    draft.text = text;
    this.ui.noteDrafts[evidenceId] = draft;
  }

  async submitNote(evidenceId: string): Promise<void> {
    const draft = this.ui.noteDrafts[evidenceId];
    if (!draft || !draft.text.trim() || draft.busy) return;
    draft.busy = true;
    draft.error = null;
    this.onChange();
    try {
      await this.client.postNote(this.sid, evidenceId, draft.text);
      delete this.ui.noteDrafts[evidenceId];
    } catch (exc) {
      // rejected text stays in the composer for retry
      draft.busy = false;
      draft.error = exc instanceof Error ? exc.message : String(exc);
    }
    this.onChange();
  }

  // -- proposal review

  openRefine(): void {
    this.ui.refine.open = true;
    this.ui.refine.index = 0;
    this.onChange();
  }

  closeRefine(): void {
    this.ui.refine.open = false;
    this.ui.refine.conflict = null;
    this.onChange();
  }

  refineStep(delta: number): void {
    const count = this.store.state.proposals.length;
    if (count === 0) return;
    const next = this.ui.refine.index + delta;
    this.ui.refine.index = Math.min(Math.max(next, 0), count - 1);
    this.onChange();
  }

  startEdit(pid: string): void {
    const proposal = this.store.state.proposals.find((p) => p.id === pid);
    this.ui.refine.edits[pid] = proposal?.proposed_text ?? "";
    this.onChange();
  }

  cancelEdit(pid: string): void {
    delete this.ui.refine.edits[pid];
    this.onChange();
  }

  setEditDraft(pid: string, text: string): void {
    this.ui.refine.edits[pid] = text;
  }

  async decide(pid: string, action: "accept" | "reject"): Promise<void> {
    await this.dispatchDecision(pid, () =>
      this.client.decideProposal(pid, action, undefined, this.sid),
    );
  }

  async acceptEdit(pid: string): Promise<void> {
    const text = this.ui.refine.edits[pid];
    if (text === undefined || !text.trim()) return;
    await this.dispatchDecision(pid, () =>
      this.client.decideProposal(pid, "edit", text, this.sid),
    );
    delete this.ui.refine.edits[pid];
    this.onChange();
  }

  private async dispatchDecision(
    pid: string,
    send: () => Promise<unknown>,
  ): Promise<void> {
    const refine = this.ui.refine;
    if (refine.busy || refine.decided[pid]) return;
    refine.busy = true;
    this.onChange();
    try {
      await send();
      refine.decided[pid] = true;
    } catch (exc) {
      if (exc instanceof ApiError && exc.kind === "conflict") {
        refine.conflict = exc.message;
      } else {
        refine.conflict = exc instanceof Error ? exc.message : String(exc);
      }
    }
    refine.busy = false;
    this.onChange();
  }

  async decideCandidate(
    cid: string,
    action: "accept" | "reject",
  ): Promise<void> {
    try {
      await this.client.decideCandidate(cid, action, this.sid);
    } catch (exc) {
      this.ui.refine.conflict =
        exc instanceof Error ? exc.message : String(exc);
      this.ui.refine.open = true;
    }
    this.onChange();
  }

  async evolve(): Promise<void> {
    const review = await this.client.evolve(this.sid);
    this.store.state.proposals = review.proposals;
    this.store.state.candidates = review.candidates;
    this.ui.refine = {
      open: true,
      index: 0,
      edits: {},
      decided: {},
      conflict: null,
      busy: false,
    };
    this.onChange();
  }

  // -- rules tab

  setTab(tab: Tab): void {
    this.ui.activeTab = tab;
    this.onChange();
  }

  setImportDraft(text: string): void {
    this.ui.rulesUi.importDraft = text;
  }

  async importRules(): Promise<void> {
    const text = this.ui.rulesUi.importDraft;
    if (!text.trim()) return;
    try {
      const outcome = await this.client.importRules(text);
      this.ui.rulesUi = {
        importDraft: "",
        importError: null,
        importSummary: `imported ${outcome.imported} rules (${outcome.total} total)`,
      };
      this.ui.rules = await this.client.getRules();
    } catch (exc) {
      this.ui.rulesUi.importError =
        exc instanceof Error ? exc.message : String(exc);
    }
    this.onChange();
  }

  setCollapsed(key: string, collapsed: boolean): void {
    this.ui.collapsed[key] = collapsed;
  }
}

const SUPERVISION_EVENTS = new Set([
  "step-status",
  "gate-error",
  "session-state",
  "plan-ingested",
  "plan-enriched",
]);
