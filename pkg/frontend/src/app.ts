import { ApiClient } from "./api.js";
import { Controller } from "./controller.js";
import { SessionStore } from "./store.js";
import { EventStream } from "./stream.js";
import type { EnforcementLevel } from "./types.js";
import { renderPage, type Tab } from "./views/page.js";

function baseUrl(): string {
  return window.location.origin;
}

async function pickSession(client: ApiClient): Promise<string | null> {
  const fromQuery = new URLSearchParams(window.location.search).get("session");
  if (fromQuery) return fromQuery;
  const sessions = await client.listSessions();
  if (sessions.length === 0) return null;
  return sessions[sessions.length - 1].id;
}

function capturedSelection(el: Element | null) {
  if (!(el instanceof HTMLTextAreaElement)) return null;
  return { id: el.id, start: el.selectionStart, end: el.selectionEnd };
}

export async function main(): Promise<void> {
  const root = document.getElementById("app");
  if (!root) return;
  const client = new ApiClient(baseUrl());
  const sid = await pickSession(client);
  if (!sid) {
    root.innerHTML =
      `<p class="placeholder">no sessions in this workspace yet; ` +
      `create one with the CLI and reload</p>`;
    return;
  }

  const store = new SessionStore(sid);
  let renderQueued = false;
  const render = () => {
    // DOM writes are coalesced per macrotask; drafts and focus survive
    if (renderQueued) return;
    renderQueued = true;
    setTimeout(() => {
      renderQueued = false;
      const selection = capturedSelection(document.activeElement);
      root.innerHTML = renderPage(store.state, controller.ui);
      if (selection?.id) {
        const el = document.getElementById(selection.id);
        if (el instanceof HTMLTextAreaElement) {
          el.focus();
          el.setSelectionRange(selection.start, selection.end);
        }
      }
    }, 0);
  };

  const controller = new Controller(client, store, render);
  render();
  await controller.bootstrap();

  const stream = new EventStream(baseUrl(), sid, {
    sinceProvider: () => store.state.lastSeq,
    onEvent: (event) => controller.handleStreamEvent(event),
    onStatus: (status) => controller.setConnection(status),
  });
  stream.start();

  root.addEventListener("click", (raw) => {
    const target = (raw.target as Element | null)?.closest("[data-action]");
    if (!(target instanceof HTMLElement)) return;
    const d = target.dataset;
    switch (d.action) {
      case "tab":
        controller.setTab(d.tab as Tab);
        break;
      case "submit-note":
        void controller.submitNote(d.evidence ?? "");
        break;
      case "open-refine":
        controller.openRefine();
        break;
      case "close-refine":
        controller.closeRefine();
        break;
      case "refine-prev":
        controller.refineStep(-1);
        break;
      case "refine-next":
        controller.refineStep(1);
        break;
      case "start-edit":
        controller.startEdit(d.proposal ?? "");
        break;
      case "cancel-edit":
        controller.cancelEdit(d.proposal ?? "");
        break;
      case "accept-edit":
        void controller.acceptEdit(d.proposal ?? "");
        break;
      case "decide":
        void controller.decide(
          d.proposal ?? "",
          d.decision as "accept" | "reject",
        );
        break;
      case "decide-candidate":
        void controller.decideCandidate(
          d.candidate ?? "",
          d.decision as "accept" | "reject",
        );
        break;
      case "evolve":
        void controller.evolve();
        break;
      case "import-rules":
        void controller.importRules();
        break;
      default:
        break;
    }
  });

  root.addEventListener("input", (raw) => {
    const target = raw.target;
    if (!(target instanceof HTMLTextAreaElement)) return;
    if (target.dataset.noteDraft !== undefined) {
      controller.setNoteDraft(target.dataset.noteDraft, target.value);
      // only the submit button's enabled state depends on the draft
      const button = target.parentElement?.querySelector(
        "button[data-action='submit-note']",
      );
      if (button instanceof HTMLButtonElement) {
        button.disabled = !target.value.trim();
      }
    } else if (target.dataset.editDraft !== undefined) {
      controller.setEditDraft(target.dataset.editDraft, target.value);
    } else if (target.dataset.importDraft !== undefined) {
      controller.setImportDraft(target.value);
      const button = target.parentElement?.querySelector(
        "button[data-action='import-rules']",
      );
      if (button instanceof HTMLButtonElement) {
        button.disabled = !target.value.trim();
      }
    }
  });

  root.addEventListener("change", (raw) => {
    const target = raw.target;
    if (!(target instanceof HTMLSelectElement)) return;
    if (target.dataset.action === "set-level") {
      void controller
        .setLevel(
          target.dataset.step ?? "",
          target.dataset.rule ?? "",
          target.value as EnforcementLevel,
        )
        .catch(() => render()); // a rejected edit snaps the control back
    }
  });

  // remember which subtrees the user collapsed across re-renders
  root.addEventListener(
    "toggle",
    (raw) => {
      const target = raw.target;
      if (target instanceof HTMLDetailsElement && target.dataset.key) {
        controller.setCollapsed(target.dataset.key, !target.open);
      }
    },
    true,
  );
}

void main();
