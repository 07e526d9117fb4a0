// Shapes served by the local HTTP service. The UI renders these verbatim
// and never derives gate verdicts of its own.

export type EnforcementLevel = "non-strict" | "strict" | "testable";
export type StepStatus = "pending" | "in-progress" | "complete";
export type SessionState = "planning" | "executing" | "reviewing" | "closed";

export interface RuleVersion {
  seq: number;
  text: string;
  cause: string;
  timestamp: string;
  provenance_note_ids: string[];
}

export interface Rule {
  id: string;
  title: string;
  description: string;
  category: string;
  enforcement_default: EnforcementLevel;
  kind: string;
  confidence: number;
  decay: number;
  scope: string;
  origin: string;
  retired: boolean;
  versions: RuleVersion[];
}

export interface RuleBinding {
  rule_id: string;
  level: EnforcementLevel;
  rationale: string;
}

export interface PlanStep {
  id: string;
  title: string;
  details: string[];
  children: PlanStep[];
  bindings: RuleBinding[];
  status: StepStatus;
}

export interface Plan {
  schema_version: number;
  id: string;
  source: string;
  created_at: string;
  source_hash: string;
  enriched: boolean;
  ruleset_hash: string | null;
  steps: PlanStep[];
}

export interface SessionDoc {
  schema_version: number;
  id: string;
  state: SessionState;
  ruleset_hash: string;
  created_at: string;
  enforce_gate: boolean;
  ingested_plan_hashes: string[];
  gate_error_counts: Record<string, number>;
  last_event_at: string | null;
  last_seq: number;
}

export interface TestRun {
  command: string;
  status: "passed" | "failed";
  execution_time: number;
  runs: number;
  captured_output: string;
  reason: string | null;
  exit_code: number | null;
}

export interface EvidenceRecord {
  schema_version: number;
  id: string;
  session_id: string;
  step_id: string;
  rule_id: string;
  level: EnforcementLevel;
  summary: string;
  artifacts: { path: string; lines: string }[];
  verified: boolean;
  advisory: boolean;
  submitted_at: string;
  test: TestRun | null;
  warnings: string[];
  event_seq: number;
}

export interface Note {
  id: string;
  evidence_id: string;
  rule_id: string;
  text: string;
  author: string;
  created_at: string;
}

export interface Proposal {
  id: string;
  rule_id: string;
  current_text: string;
  proposed_text: string;
  source_note_ids: string[];
  status: "pending" | "accepted" | "edited-accepted" | "rejected";
  ruleset_hash: string;
  low_coverage: boolean;
}

export interface Candidate {
  id: string;
  suggested_title: string;
  suggested_text: string;
  trigger: { evidence_id: string; event_seq: number };
  status: "pending" | "accepted" | "rejected";
}

export interface Supervision {
  summary: string;
  deviation: boolean;
  reason: string | null;
}

export interface Envelope<T> {
  status: "ok" | "error" | "conflict";
  payload: T;
  etag: string | null;
}

// One line of the event stream: a committed event, a keepalive, or a
// full snapshot when the resume point was unusable.
export interface StreamEvent {
  type: string;
  seq: number;
  at?: string;
  data?: Record<string, unknown>;
  session?: SessionDoc;
  plan?: Plan | null;
  evidence?: EvidenceRecord[];
  notes?: Note[];
  proposals?: Proposal[];
  candidates?: Candidate[];
}
