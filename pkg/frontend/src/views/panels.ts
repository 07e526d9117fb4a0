import { esc } from "../html.js";
import type { Candidate, SessionDoc, Supervision } from "../types.js";

export function renderSupervisionPanel(
  supervision: Supervision | null,
  doc: SessionDoc | null,
  collapsed?: Record<string, boolean>,
): string {
  if (!supervision) return "";
  const gateErrors = doc
    ? Object.values(doc.gate_error_counts).reduce((a, b) => a + b, 0)
    : 0;
  const deviation = supervision.deviation
    ? `<p class="deviation">deviation: ${esc(supervision.reason ?? "unspecified")}</p>`
    : "";
  const open = collapsed?.["panel:supervision"] ? "" : " open";
  return (
    `<details class="panel floating supervision" data-key="panel:supervision"${open}>` +
    `<summary>supervision</summary>` +
    `<p class="supervision-summary">${esc(supervision.summary)}</p>` +
    deviation +
    `<p class="gate-count">blocked completion attempts: ${gateErrors}</p>` +
    `</details>`
  );
}

export function renderLearningPanel(
  candidates: Candidate[],
  collapsed?: Record<string, boolean>,
): string {
  const pending = candidates.filter((c) => c.status === "pending");
  const settled = candidates.filter((c) => c.status !== "pending");
  const card = (candidate: Candidate) => {
    const controls =
      candidate.status === "pending"
        ? `<span class="candidate-controls">` +
          `<button data-action="decide-candidate" data-decision="accept" ` +
          `data-candidate="${esc(candidate.id)}">accept</button>` +
          `<button data-action="decide-candidate" data-decision="reject" ` +
          `data-candidate="${esc(candidate.id)}">reject</button></span>`
        : `<span class="badge">${esc(candidate.status)}</span>`;
    return (
      `<li class="candidate" data-candidate-id="${esc(candidate.id)}">` +
      `<strong>${esc(candidate.suggested_title)}</strong>` +
      `<p>${esc(candidate.suggested_text)}</p>${controls}</li>`
    );
  };
  const body =
    candidates.length === 0
      ? `<p class="placeholder">no learned-rule candidates yet</p>`
      : `<ul class="candidates">${[...pending, ...settled].map(card).join("")}</ul>`;
  const open = collapsed?.["panel:learning"] ? "" : " open";
  return (
    `<details class="panel floating learning" data-key="panel:learning"${open}>` +
    `<summary>rule learning</summary>${body}</details>`
  );
}
