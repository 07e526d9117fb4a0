import { esc } from "../html.js";
import type { Plan, PlanStep, Rule, RuleBinding } from "../types.js";

const LEVELS = ["non-strict", "strict", "testable"] as const;

export interface PlanViewOptions {
  rules: Record<string, Rule>;
  /** open/closed choices the user made, keyed by step id */
  collapsed?: Record<string, boolean>;
}

function ruleTitle(rules: Record<string, Rule>, ruleId: string): string {
  return rules[ruleId]?.title ?? ruleId;
}

function renderBinding(
  step: PlanStep,
  binding: RuleBinding,
  options: PlanViewOptions,
): string {
  // level changes are server-validated; the control is only live while
  // the server would accept them (step still pending)
  const disabled = step.status !== "pending" ? " disabled" : "";
  const choices = LEVELS.map(
    (level) =>
      `<option value="${level}"${level === binding.level ? " selected" : ""}>${level}</option>`,
  ).join("");
  return (
    `<span class="rule-chip level-${esc(binding.level)}" title="${esc(binding.rationale)}">` +
    `<span class="rule-title">${esc(ruleTitle(options.rules, binding.rule_id))}</span>` +
    `<select class="level-toggle" data-action="set-level" ` +
    `data-step="${esc(step.id)}" data-rule="${esc(binding.rule_id)}"${disabled}>` +
    choices +
    `</select></span>`
  );
}

function renderStep(step: PlanStep, options: PlanViewOptions): string {
  const chip = `<span class="chip chip-${esc(step.status)}">${esc(step.status)}</span>`;
  const bindings = step.bindings
    .map((b) => renderBinding(step, b, options))
    .join("");
  const details = step.details.length
    ? `<ul class="step-details">${step.details
        .map((d) => `<li>${esc(d)}</li>`)
        .join("")}</ul>`
    : "";
  const header =
    `<span class="step-id">${esc(step.id)}</span> ` +
    `<span class="step-title">${esc(step.title)}</span> ${chip}` +
    `<span class="bindings">${bindings}</span>`;
  if (step.children.length === 0) {
    return `<li class="step leaf" data-step-id="${esc(step.id)}">${header}${details}</li>`;
  }
  const open = options.collapsed?.["step:" + step.id] ? "" : " open";
  const children = step.children
    .map((child) => renderStep(child, options))
    .join("");
  return (
    `<li class="step branch" data-step-id="${esc(step.id)}">` +
    `<details data-key="step:${esc(step.id)}"${open}><summary>${header}</summary>` +
    `${details}<ol class="substeps">${children}</ol></details></li>`
  );
}

export function renderPlanOutline(
  plan: Plan | null,
  options: PlanViewOptions,
): string {
  if (!plan || plan.steps.length === 0) {
    return `<p class="placeholder">awaiting plan</p>`;
  }
  const steps = plan.steps.map((step) => renderStep(step, options)).join("");
  const badge = plan.enriched
    ? `<span class="badge enriched">enriched</span>`
    : `<span class="badge">raw</span>`;
  return (
    `<div class="plan-meta">${badge} <span class="plan-source">${esc(plan.source)}</span></div>` +
    `<ol class="plan-outline">${steps}</ol>`
  );
}
