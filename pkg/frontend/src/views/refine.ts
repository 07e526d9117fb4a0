import { esc } from "../html.js";
import type { Proposal, Rule } from "../types.js";

export interface RefineUiState {
  open: boolean;
  index: number;
  /** in-progress inline edits keyed by proposal id */
  edits: Record<string, string | undefined>;
  /** proposal ids whose decision round-trip has completed */
  decided: Record<string, boolean>;
  conflict: string | null;
  busy: boolean;
}

export interface RefineViewOptions {
  rules: Record<string, Rule>;
  ui: RefineUiState;
}

type DiffPiece = { kind: "same" | "del" | "ins"; text: string };

/** Word-level diff via longest common subsequence; small texts only. */
export function diffWords(before: string, after: string): DiffPiece[] {
  const a = before.split(/(\s+)/).filter((t) => t.length > 0);
  const b = after.split(/(\s+)/).filter((t) => t.length > 0);
  const rows = a.length + 1;
  const cols = b.length + 1;
  const table = new Array<number>(rows * cols).fill(0);
  for (let i = a.length - 1; i >= 0; i -= 1) {
    for (let j = b.length - 1; j >= 0; j -= 1) {
      table[i * cols + j] =
        a[i] === b[j]
          ? table[(i + 1) * cols + j + 1] + 1
          : Math.max(table[(i + 1) * cols + j], table[i * cols + j + 1]);
    }
  }
  const pieces: DiffPiece[] = [];
  const push = (kind: DiffPiece["kind"], text: string) => {
    const last = pieces[pieces.length - 1];
    if (last && last.kind === kind) last.text += text;
    else pieces.push({ kind, text });
  };
  let i = 0;
  let j = 0;
  while (i < a.length && j < b.length) {
    if (a[i] === b[j]) {
      push("same", a[i]);
      i += 1;
      j += 1;
    } else if (table[(i + 1) * cols + j] >= table[i * cols + j + 1]) {
      push("del", a[i]);
      i += 1;
    } else {
      push("ins", b[j]);
      j += 1;
    }
  }
  while (i < a.length) push("del", a[i++]);
  while (j < b.length) push("ins", b[j++]);
  return pieces;
}

function renderDiff(before: string, after: string): string {
  const html = diffWords(before, after)
    .map((piece) => {
      if (piece.kind === "same") return esc(piece.text);
      const tag = piece.kind === "del" ? "del" : "ins";
      return `<${tag}>${esc(piece.text)}</${tag}>`;
    })
    .join("");
  return `<div class="diff">${html}</div>`;
}

function renderDecisionControls(
  proposal: Proposal,
  ui: RefineUiState,
): string {
  const settled = proposal.status !== "pending" || ui.decided[proposal.id];
  if (settled) {
    const label =
      proposal.status === "pending" ? "decided" : proposal.status;
    return `<p class="decision-done">decision recorded: <strong>${esc(label)}</strong></p>`;
  }
  const busy = ui.busy ? " disabled" : "";
  const editing = ui.edits[proposal.id];
  if (editing !== undefined) {
    return (
      `<div class="inline-edit">` +
      `<textarea id="edit-${esc(proposal.id)}" data-edit-draft="${esc(proposal.id)}">${esc(editing)}</textarea>` +
      `<button data-action="accept-edit" data-proposal="${esc(proposal.id)}"${busy}>accept edited text</button>` +
      `<button data-action="cancel-edit" data-proposal="${esc(proposal.id)}"${busy}>cancel</button>` +
      `</div>`
    );
  }
  return (
    `<div class="decision-controls">` +
    `<button data-action="decide" data-decision="accept" data-proposal="${esc(proposal.id)}"${busy}>accept</button>` +
    `<button data-action="start-edit" data-proposal="${esc(proposal.id)}"${busy}>edit inline</button>` +
    `<button data-action="decide" data-decision="reject" data-proposal="${esc(proposal.id)}"${busy}>reject</button>` +
    `</div>`
  );
}

export function renderRefineModal(
  proposals: Proposal[],
  options: RefineViewOptions,
): string {
  const ui = options.ui;
  if (!ui.open) return "";
  if (ui.conflict) {
    return (
      `<div class="modal refine-modal"><div class="modal-body">` +
      `<p class="conflict">${esc(ui.conflict)}</p>` +
      `<button data-action="evolve">regenerate proposals</button>` +
      `<button data-action="close-refine">close</button>` +
      `</div></div>`
    );
  }
  if (proposals.length === 0) {
    return (
      `<div class="modal refine-modal"><div class="modal-body">` +
      `<p class="placeholder">no refinement proposals; run evolve after adding notes</p>` +
      `<button data-action="close-refine">close</button>` +
      `</div></div>`
    );
  }
  const index = Math.min(ui.index, proposals.length - 1);
  const proposal = proposals[index];
  const rule = options.rules[proposal.rule_id];
  const lowCoverage = proposal.low_coverage
    ? `<span class="badge low-coverage">low coverage</span>`
    : "";
  const stepper =
    `<nav class="stepper">` +
    `<button data-action="refine-prev"${index === 0 ? " disabled" : ""}>prev</button>` +
    `<span>proposal ${index + 1} of ${proposals.length}</span>` +
    `<button data-action="refine-next"${index === proposals.length - 1 ? " disabled" : ""}>next</button>` +
    `</nav>`;
  return (
    `<div class="modal refine-modal" data-proposal-id="${esc(proposal.id)}">` +
    `<div class="modal-body">` +
    `<header><h2>refine: ${esc(rule?.title ?? proposal.rule_id)}</h2>${lowCoverage}` +
    `<button class="close" data-action="close-refine">close</button></header>` +
    stepper +
    renderDiff(proposal.current_text, proposal.proposed_text) +
    renderDecisionControls(proposal, ui) +
    `</div></div>`
  );
}
