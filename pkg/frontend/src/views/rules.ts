import { esc } from "../html.js";
import type { Rule } from "../types.js";

export interface RulesUiState {
  importDraft: string;
  importError: string | null;
  importSummary: string | null;
}

function renderRule(rule: Rule): string {
  const origin =
    rule.origin === "learned" ? `<span class="badge learned">learned</span>` : "";
  const retired = rule.retired ? `<span class="badge retired">retired</span>` : "";
  const versions =
    rule.versions.length > 1
      ? `<span class="badge">v${rule.versions.length}</span>`
      : "";
  return (
    `<li class="rule" data-rule-id="${esc(rule.id)}">` +
    `<strong>${esc(rule.title)}</strong>` +
    ` <span class="badge level-${esc(rule.enforcement_default)}">${esc(rule.enforcement_default)}</span>` +
    `${origin}${retired}${versions}` +
    `<p class="rule-text">${esc(rule.description)}</p></li>`
  );
}

export function renderRulesPanel(
  rules: Record<string, Rule>,
  ui: RulesUiState,
): string {
  const byCategory = new Map<string, Rule[]>();
  for (const rule of Object.values(rules)) {
    const bucket = byCategory.get(rule.category) ?? [];
    bucket.push(rule);
    byCategory.set(rule.category, bucket);
  }
  const groups = [...byCategory.keys()]
    .sort()
    .map((category) => {
      const items = byCategory
        .get(category)!
        .sort((a, b) => a.id.localeCompare(b.id))
        .map(renderRule)
        .join("");
      return (
        `<section class="rule-category" data-category="${esc(category)}">` +
        `<h3>${esc(category)}</h3><ul class="rules">${items}</ul></section>`
      );
    })
    .join("");
  const error = ui.importError
    ? `<p class="inline-error">${esc(ui.importError)}</p>`
    : "";
  const summary = ui.importSummary
    ? `<p class="import-summary">${esc(ui.importSummary)}</p>`
    : "";
  const importForm =
    `<div class="rule-import">` +
    `<textarea id="rule-import" data-import-draft placeholder="paste a markdown rules file">${esc(ui.importDraft)}</textarea>` +
    `<button data-action="import-rules"${ui.importDraft.trim() ? "" : " disabled"}>import rules</button>` +
    `${error}${summary}</div>`;
  const body =
    Object.keys(rules).length === 0
      ? `<p class="placeholder">no rules structured yet</p>`
      : groups;
  return `<div class="rules-tab">${body}${importForm}</div>`;
}
