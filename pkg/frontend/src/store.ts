import type {
  Candidate,
  EvidenceRecord,
  Note,
  Plan,
  PlanStep,
  Proposal,
  SessionDoc,
  StreamEvent,
  Supervision,
} from "./types.js";

export interface StoreState {
  sessionId: string;
  doc: SessionDoc | null;
  plan: Plan | null;
  supervision: Supervision | null;
  evidence: EvidenceRecord[];
  notes: Note[];
  proposals: Proposal[];
  candidates: Candidate[];
  lastSeq: number;
}

/** What the caller must do after an event was folded in. */
export interface ApplyResult {
  applied: boolean;
  /** plan changed in a way the store cannot reproduce locally */
  planStale: boolean;
  /** a decision landed, so rule texts on the server may differ now */
  rulesChanged: boolean;
}

const NOTHING: ApplyResult = {
  applied: false,
  planStale: false,
  rulesChanged: false,
};

export function findStep(steps: PlanStep[], stepId: string): PlanStep | null {
  for (const step of steps) {
    if (step.id === stepId) return step;
    const hit = findStep(step.children, stepId);
    if (hit) return hit;
  }
  return null;
}

export function walkSteps(steps: PlanStep[]): PlanStep[] {
  const out: PlanStep[] = [];
  for (const step of steps) {
    out.push(step, ...walkSteps(step.children));
  }
  return out;
}

/**
 * Client-side mirror of the session's event-sourced state. Everything
 * here is a verbatim copy of server payloads; the only local derivation
 * is the same display bookkeeping the server applies (ancestor steps
 * light up when a child starts). Gate verdicts are never computed here.
 */
export class SessionStore {
  state: StoreState;

  constructor(sessionId: string) {
    this.state = {
      sessionId,
      doc: null,
      plan: null,
      supervision: null,
      evidence: [],
      notes: [],
      proposals: [],
      candidates: [],
      lastSeq: 0,
    };
  }

  bootstrap(data: {
    session: SessionDoc;
    plan: Plan | null;
    supervision: Supervision;
    evidence?: EvidenceRecord[];
    notes?: Note[];
    proposals?: Proposal[];
    candidates?: Candidate[];
  }): void {
    const s = this.state;
    s.doc = data.session;
    s.plan = data.plan;
    s.supervision = data.supervision;
    s.evidence = [...(data.evidence ?? [])];
    s.notes = [...(data.notes ?? [])];
    s.proposals = [...(data.proposals ?? [])];
    s.candidates = [...(data.candidates ?? [])];
    s.lastSeq = Math.max(
      data.session.last_seq,
      ...s.evidence.map((r) => r.event_seq),
    );
  }

  replacePlan(plan: Plan): void {
    this.state.plan = plan;
  }

  applyEvent(event: StreamEvent): ApplyResult {
    const s = this.state;
    if (event.type === "keepalive") return NOTHING;
    if (event.type === "snapshot") {
      s.doc = event.session ?? s.doc;
      s.plan = event.plan ?? null;
      s.evidence = [...(event.evidence ?? [])];
      s.notes = [...(event.notes ?? [])];
      s.proposals = [...(event.proposals ?? [])];
      s.candidates = [...(event.candidates ?? [])];
      s.lastSeq = event.seq;
      return { applied: true, planStale: false, rulesChanged: true };
    }
    if (event.seq <= s.lastSeq) return NOTHING;

    const data = (event.data ?? {}) as Record<string, unknown>;
    let planStale = false;
    let rulesChanged = false;
    switch (event.type) {
      case "session-created":
        s.doc = data.doc as SessionDoc;
        break;
      case "plan-ingested":
      case "plan-enriched":
        s.plan = data.plan as Plan;
        break;
      case "plan-edited":
        // the event carries only the edit; re-read the projected plan
        planStale = true;
        break;
      case "step-status": {
        const step = s.plan
          ? findStep(s.plan.steps, data.step_id as string)
          : null;
        if (step) {
          step.status = data.status as PlanStep["status"];
          if (step.status === "in-progress") {
            this.promoteAncestors(step.id);
            if (s.doc && s.doc.state === "planning") s.doc.state = "executing";
          }
        }
        break;
      }
      case "gate-error": {
        if (s.doc) {
          const sid = data.step_id as string;
          s.doc.gate_error_counts[sid] =
            (s.doc.gate_error_counts[sid] ?? 0) + 1;
        }
        break;
      }
      case "evidence": {
        const record = data.record as EvidenceRecord;
        if (!s.evidence.some((r) => r.id === record.id)) {
          s.evidence.push(record);
        }
        break;
      }
      case "note": {
        const note = data.note as Note;
        if (!s.notes.some((n) => n.id === note.id)) s.notes.push(note);
        break;
      }
      case "proposals":
        s.proposals = [...(data.proposals as Proposal[])];
        s.candidates = [...(data.candidates as Candidate[])];
        break;
      case "proposal-decision": {
        for (const proposal of s.proposals) {
          if (proposal.id === data.proposal_id) {
            proposal.status = data.status as Proposal["status"];
            if (typeof data.proposed_text === "string") {
              proposal.proposed_text = data.proposed_text;
            }
          }
        }
        rulesChanged = true;
        break;
      }
      case "candidate-decision": {
        for (const candidate of s.candidates) {
          if (candidate.id === data.candidate_id) {
            candidate.status = data.status as Candidate["status"];
          }
        }
        rulesChanged = true;
        break;
      }
      case "session-state":
        if (s.doc) s.doc.state = data.state as SessionDoc["state"];
        break;
      default:
        break; // diagnostics and future event types render nothing
    }
    s.lastSeq = event.seq;
    if (s.doc) {
      s.doc.last_seq = event.seq;
      if (event.at) s.doc.last_event_at = event.at;
    }
    return { applied: true, planStale, rulesChanged };
  }

  private promoteAncestors(stepId: string): void {
    const plan = this.state.plan;
    if (!plan) return;
    const parts = stepId.replace(/^step-/, "").split(".");
    for (let depth = 1; depth < parts.length; depth += 1) {
      const ancestorId = "step-" + parts.slice(0, depth).join(".");
      const ancestor = findStep(plan.steps, ancestorId);
      if (ancestor && ancestor.status === "pending") {
        ancestor.status = "in-progress";
      }
    }
  }

  notesFor(evidenceId: string): Note[] {
    return this.state.notes.filter((n) => n.evidence_id === evidenceId);
  }
}
