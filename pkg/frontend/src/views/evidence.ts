import { esc } from "../html.js";
import type { EvidenceRecord, Note, Rule, TestRun } from "../types.js";

export interface NoteDraft {
  text: string;
  error: string | null;
  busy: boolean;
}

export interface EvidenceViewOptions {
  rules: Record<string, Rule>;
  notesFor: (evidenceId: string) => Note[];
  drafts: Record<string, NoteDraft | undefined>;
}

function renderTest(test: TestRun): string {
  // engine-reported outcome only; the client never re-judges a test
  const label = test.status === "passed" ? "Passed" : "Failed";
  const seconds = test.execution_time.toFixed(2);
  return (
    `<dl class="test-result test-${esc(test.status)}">` +
    `<dt>Status</dt><dd class="test-status">Status: ${label}</dd>` +
    `<dt>Command</dt><dd><code>${esc(test.command)}</code></dd>` +
    `<dt>Time</dt><dd>${esc(seconds)}s</dd>` +
    `<dt>Runs</dt><dd>${esc(test.runs)}</dd>` +
    `</dl>`
  );
}

function renderNotes(notes: Note[]): string {
  if (notes.length === 0) return "";
  const chips = notes
    .map(
      (note) =>
        `<li class="note-chip" data-note-id="${esc(note.id)}">` +
        `<span class="note-author">${esc(note.author)}</span> ${esc(note.text)}</li>`,
    )
    .join("");
  return `<ul class="notes">${chips}</ul>`;
}

function renderComposer(evidenceId: string, draft?: NoteDraft): string {
  const text = draft?.text ?? "";
  const error = draft?.error
    ? `<p class="inline-error">${esc(draft.error)}</p>`
    : "";
  const disabled = !text.trim() || draft?.busy ? " disabled" : "";
  return (
    `<div class="note-composer">` +
    `<textarea id="note-${esc(evidenceId)}" data-note-draft="${esc(evidenceId)}" ` +
    `placeholder="add a note for rule refinement">${esc(text)}</textarea>` +
    `<button data-action="submit-note" data-evidence="${esc(evidenceId)}"${disabled}>` +
    `add note</button>${error}</div>`
  );
}

function renderRecord(
  record: EvidenceRecord,
  options: EvidenceViewOptions,
): string {
  const rule = options.rules[record.rule_id];
  const verdict = record.verified
    ? `<span class="verdict verified">verified</span>`
    : `<span class="verdict unverified">unverified</span>`;
  const advisory = record.advisory
    ? `<span class="badge advisory">advisory</span>`
    : "";
  const artifacts = record.artifacts.length
    ? `<ul class="artifacts">${record.artifacts
        .map((a) => `<li><code>${esc(a.path)}:${esc(a.lines)}</code></li>`)
        .join("")}</ul>`
    : "";
  const warnings = record.warnings.length
    ? `<ul class="warnings">${record.warnings
        .map((w) => `<li>${esc(w)}</li>`)
        .join("")}</ul>`
    : "";
  const test = record.test ? renderTest(record.test) : "";
  return (
    `<article class="evidence" data-evidence-id="${esc(record.id)}">` +
    `<header><span class="rule-name">${esc(rule?.title ?? record.rule_id)}</span>` +
    ` <span class="at-step">${esc(record.step_id)}</span>` +
    ` <span class="badge level-${esc(record.level)}">${esc(record.level)}</span>` +
    ` ${verdict}${advisory}</header>` +
    `<p class="summary">${esc(record.summary)}</p>` +
    `${artifacts}${test}${warnings}` +
    `${renderNotes(options.notesFor(record.id))}` +
    `${renderComposer(record.id, options.drafts[record.id])}` +
    `</article>`
  );
}

export function renderEvidencePanel(
  records: EvidenceRecord[],
  options: EvidenceViewOptions,
): string {
  if (records.length === 0) {
    return `<p class="placeholder">no enforcement evidence yet</p>`;
  }
  const ordered = [...records].sort((a, b) => a.event_seq - b.event_seq);
  return `<div class="evidence-list">${ordered
    .map((record) => renderRecord(record, options))
    .join("")}</div>`;
}
