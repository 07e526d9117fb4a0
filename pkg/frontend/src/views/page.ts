import { esc } from "../html.js";
import type { ConnectionState } from "../stream.js";
import type { StoreState } from "../store.js";
import type { Rule } from "../types.js";
import { renderEvidencePanel, type NoteDraft } from "./evidence.js";
import { renderLearningPanel, renderSupervisionPanel } from "./panels.js";
import { renderPlanOutline } from "./plan.js";
import { renderRefineModal, type RefineUiState } from "./refine.js";
import { renderRulesPanel, type RulesUiState } from "./rules.js";

export type Tab = "plan" | "evidence" | "rules";

export interface PageUiState {
  activeTab: Tab;
  connection: ConnectionState;
  rules: Record<string, Rule>;
  noteDrafts: Record<string, NoteDraft | undefined>;
  refine: RefineUiState;
  rulesUi: RulesUiState;
  collapsed: Record<string, boolean>;
}

function tabButton(tab: Tab, active: Tab, label: string): string {
  const current = tab === active ? ` class="active"` : "";
  return `<button${current} data-action="tab" data-tab="${tab}">${label}</button>`;
}

export function renderPage(state: StoreState, ui: PageUiState): string {
  const doc = state.doc;
  const staleBanner =
    ui.connection === "live"
      ? ""
      : `<div class="banner stale-banner">connection lost; view may be stale (reconnecting)</div>`;
  const header = doc
    ? `<header class="session-header">` +
      `<h1>session ${esc(doc.id)}</h1>` +
      `<span class="badge state-${esc(doc.state)}">${esc(doc.state)}</span>` +
      `<span class="badge conn-${esc(ui.connection)}">${esc(ui.connection)}</span>` +
      `<span class="seq">event ${esc(state.lastSeq)}</span>` +
      `<button data-action="evolve">evolve rules</button>` +
      `<button data-action="open-refine">review proposals</button>` +
      `</header>`
    : `<header class="session-header"><h1>loading session…</h1></header>`;
  const tabs =
    `<nav class="tabs">` +
    tabButton("plan", ui.activeTab, "plan") +
    tabButton("evidence", ui.activeTab, "evidence") +
    tabButton("rules", ui.activeTab, "rules") +
    `</nav>`;
  let body = "";
  if (ui.activeTab === "plan") {
    body = renderPlanOutline(state.plan, {
      rules: ui.rules,
      collapsed: ui.collapsed,
    });
  } else if (ui.activeTab === "evidence") {
    body = renderEvidencePanel(state.evidence, {
      rules: ui.rules,
      notesFor: (id) => state.notes.filter((n) => n.evidence_id === id),
      drafts: ui.noteDrafts,
    });
  } else {
    body = renderRulesPanel(ui.rules, ui.rulesUi);
  }
  return (
    staleBanner +
    header +
    tabs +
    `<main class="tab-body" data-tab="${esc(ui.activeTab)}">${body}</main>` +
    renderSupervisionPanel(state.supervision, doc, ui.collapsed) +
    renderLearningPanel(state.candidates, ui.collapsed) +
    renderRefineModal(state.proposals, { rules: ui.rules, ui: ui.refine })
  );
}
