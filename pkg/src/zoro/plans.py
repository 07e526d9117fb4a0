"""Plans: ingest step trees from agent logs, bind rules to steps, edit safely.

A plan is a tree of steps with dotted-ordinal ids (step-1, step-1.2). Lines
shaped like `Step N[.M[.K]]: title` open steps, indented `- ` lines attach
details to the innermost open step, everything else is conversation noise. A
log that contains several plan dumps contributes only its last one; a content
hash makes ingestion at-most-once.

Enrichment never splits the difference: either the whole plan gains bindings
(deterministic matcher or a validated remote response) or it is left exactly
as it was.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .rules import ENFORCEMENT_LEVELS, RuleSet
from .util import content_hash, content_tokens, now_iso, token_set

SCHEMA_VERSION = 1

STEP_STATUSES = ("pending", "in-progress", "complete")

# leading whitespace/markdown furniture only; a letter before "Step" means
# the word is mid-sentence and the line is prose
_STEP_LINE_RE = re.compile(
    r"^[\s>#*+-]*\**\s*step\s+(\d+(?:\.\d+)*)\s*\**\s*:\s*(.*?)\s*$",
    re.IGNORECASE,
)
_DETAIL_LINE_RE = re.compile(r"^\s+[-*+]\s+(.*?)\s*$")

EDIT_OPS = (
    "retitle",
    "reorder",
    "insert",
    "delete",
    "add-binding",
    "remove-binding",
    "set-binding-level",
)


class PlanError(Exception):
    pass


class EnricherError(Exception):
    pass


@dataclass
class RuleBinding:
    rule_id: str
    level: str
    rationale: str = ""

    def to_dict(self) -> dict:
        return {"rule_id": self.rule_id, "level": self.level, "rationale": self.rationale}

    @classmethod
    def from_dict(cls, data: dict) -> "RuleBinding":
        level = data["level"]
        if level not in ENFORCEMENT_LEVELS:
            raise PlanError(f"bad binding level: {level!r}")
        return cls(rule_id=data["rule_id"], level=level, rationale=data.get("rationale", ""))


@dataclass
class Step:
    id: str
    title: str
    details: list[str] = field(default_factory=list)
    children: list["Step"] = field(default_factory=list)
    bindings: list[RuleBinding] = field(default_factory=list)
    status: str = "pending"

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "title": self.title,
            "details": list(self.details),
            "children": [c.to_dict() for c in self.children],
            "bindings": [b.to_dict() for b in self.bindings],
            "status": self.status,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Step":
        status = data.get("status", "pending")
        if status not in STEP_STATUSES:
            raise PlanError(f"bad step status: {status!r}")
        return cls(
            id=data["id"],
            title=data["title"],
            details=list(data.get("details", [])),
            children=[cls.from_dict(c) for c in data.get("children", [])],
            bindings=[RuleBinding.from_dict(b) for b in data.get("bindings", [])],
            status=status,
        )


@dataclass
class Plan:
    id: str
    source: str
    created_at: str
    source_hash: str
    steps: list[Step] = field(default_factory=list)
    enriched: bool = False
    ruleset_hash: str | None = None
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "id": self.id,
            "source": self.source,
            "created_at": self.created_at,
            "source_hash": self.source_hash,
            "enriched": self.enriched,
            "ruleset_hash": self.ruleset_hash,
            "steps": [s.to_dict() for s in self.steps],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Plan":
        return cls(
            id=data["id"],
            source=data["source"],
            created_at=data["created_at"],
            source_hash=data.get("source_hash", ""),
            steps=[Step.from_dict(s) for s in data["steps"]],
            enriched=data["enriched"],
            ruleset_hash=data.get("ruleset_hash"),
            schema_version=data.get("schema_version", SCHEMA_VERSION),
        )


def walk_steps(steps: list[Step]):
    for step in steps:
        yield step
        yield from walk_steps(step.children)


def find_step(plan: Plan, step_id: str) -> Step | None:
    for step in walk_steps(plan.steps):
        if step.id == step_id:
            return step
    return None


# --- ingestion ---------------------------------------------------------------


def _segment_log(text: str) -> list[list[tuple]]:
    """Split the log into plan segments. A top-level ordinal that does not
    advance past the previous one starts a fresh plan dump."""
    segments: list[list[tuple]] = []
    current: list[tuple] = []
    last_top = 0
    for line in text.splitlines():
        step = _STEP_LINE_RE.match(line)
        if step:
            ordinal = tuple(int(p) for p in step.group(1).split("."))
            title = step.group(2).strip().strip("*").strip()
            if len(ordinal) == 1:
                if ordinal[0] <= last_top and current:
                    segments.append(current)
                    current = []
                last_top = ordinal[0]
            current.append(("step", ordinal, title, line))
            continue
        detail = _DETAIL_LINE_RE.match(line)
        if detail and current:
            current.append(("detail", detail.group(1), line))
    if current:
        segments.append(current)
    return segments


def ingest_plan(
    text: str,
    source: str = "agent-log",
    seen_hashes: set[str] | None = None,
) -> Plan | None:
    """Extract the latest plan from free text; None when there is no plan or
    its content hash was already ingested."""
    segments = _segment_log(text)
    if not segments:
        return None
    segment = segments[-1]
    raw = "\n".join(entry[-1] for entry in segment)
    source_hash = content_hash(raw)
    if seen_hashes is not None and source_hash in seen_hashes:
        return None

    roots: list[Step] = []
    by_ordinal: dict[tuple, Step] = {}
    last_step: Step | None = None

    def ensure(ordinal: tuple) -> Step:
        if ordinal in by_ordinal:
            return by_ordinal[ordinal]
        step = Step(id="step-" + ".".join(str(p) for p in ordinal), title="(untitled)")
        by_ordinal[ordinal] = step
        if len(ordinal) == 1:
            roots.append(step)
        else:
            ensure(ordinal[:-1]).children.append(step)
        return step

    for entry in segment:
        if entry[0] == "step":
            _, ordinal, title, _raw = entry
            step = ensure(ordinal)
            if title:
                step.title = title
            last_step = step
        else:
            _, detail_text, _raw = entry
            if last_step is not None:
                last_step.details.append(detail_text)

    if not roots:
        return None
    return Plan(
        id="plan-" + source_hash[:12],
        source=source,
        created_at=now_iso(),
        source_hash=source_hash,
        steps=roots,
    )


# --- enrichment --------------------------------------------------------------


def deterministic_match(step: Step, ruleset: RuleSet) -> list[RuleBinding]:
    """Bind a rule to the step when the step text mentions every token of the
    rule's category, or shares at least two content tokens with the rule
    title. Strongest overlap first, ties by rule id."""
    step_tokens = token_set(step.title + " " + " ".join(step.details))
    candidates = []
    for rule in ruleset.active():
        category_parts = {p for p in rule.category.split("_") if p}
        category_hit = bool(category_parts) and category_parts <= step_tokens
        overlap = content_tokens(rule.title) & step_tokens
        if not category_hit and len(overlap) < 2:
            continue
        reasons = []
        if category_hit:
            reasons.append(f"category '{rule.category}' mentioned")
        if len(overlap) >= 2:
            reasons.append("title overlap: " + ", ".join(sorted(overlap)))
        candidates.append(
            (
                -len(overlap),
                rule.id,
                RuleBinding(
                    rule_id=rule.id,
                    level=rule.enforcement_default,
                    rationale="; ".join(reasons),
                ),
            )
        )
    return [binding for _, _, binding in sorted(candidates, key=lambda c: (c[0], c[1]))]


def _validate_remote_response(plan: Plan, parsed: Plan, ruleset: RuleSet) -> None:
    original = {s.id: s for s in walk_steps(plan.steps)}
    returned = {s.id: s for s in walk_steps(parsed.steps)}
    for sid, orig in original.items():
        if sid not in returned:
            raise EnricherError(f"response dropped step {sid}")
        got = returned[sid]
        if got.title != orig.title:
            raise EnricherError(f"response changed the title of step {sid}")
        if got.details[: len(orig.details)] != orig.details:
            raise EnricherError(f"response rewrote details of step {sid}")
    for step in returned.values():
        for binding in step.bindings:
            rule = ruleset.rules.get(binding.rule_id)
            if rule is None or rule.retired:
                raise EnricherError(f"response referenced unknown rule: {binding.rule_id}")


def enrich_plan(plan: Plan, ruleset: RuleSet, transport=None) -> Plan:
    """Attach rule bindings to every step.

    Without a transport the deterministic matcher runs locally and the plan is
    updated in place. With a transport (a callable taking the request dict and
    returning an enriched plan dict) the response is schema-validated; any
    problem raises EnricherError and the original plan stays untouched, never
    half-enriched."""
    if plan.enriched:
        raise PlanError("plan is already enriched")
    if transport is None:
        for step in walk_steps(plan.steps):
            step.bindings = deterministic_match(step, ruleset)
        plan.enriched = True
        plan.ruleset_hash = ruleset.content_hash()
        return plan

    request = {"plan": plan.to_dict(), "ruleset": ruleset.to_dict()}
    try:
        response = transport(request)
    except Exception as exc:
        raise EnricherError(f"remote enricher failed: {exc}") from exc
    if not isinstance(response, dict) or not isinstance(response.get("steps"), list):
        raise EnricherError("response is not a plan object")
    try:
        parsed = Plan.from_dict(
            {
                "schema_version": SCHEMA_VERSION,
                "id": plan.id,
                "source": plan.source,
                "created_at": plan.created_at,
                "source_hash": plan.source_hash,
                "enriched": True,
                "ruleset_hash": ruleset.content_hash(),
                "steps": response["steps"],
            }
        )
    except (PlanError, KeyError, TypeError) as exc:
        raise EnricherError(f"response failed schema validation: {exc}") from exc
    _validate_remote_response(plan, parsed, ruleset)
    return parsed


# --- edits -------------------------------------------------------------------


def _renumber(steps: list[Step], prefix: str = "step-") -> None:
    for index, step in enumerate(steps, start=1):
        step.id = f"{prefix}{index}"
        for child_index, child in enumerate(step.children, start=1):
            _renumber_child(child, f"{step.id}.{child_index}")


def _renumber_child(step: Step, new_id: str) -> None:
    step.id = new_id
    for child_index, child in enumerate(step.children, start=1):
        _renumber_child(child, f"{new_id}.{child_index}")


def _locate(plan: Plan, step_id: str) -> tuple[list[Step], int]:
    def search(children: list[Step]) -> tuple[list[Step], int] | None:
        for index, step in enumerate(children):
            if step.id == step_id:
                return children, index
            found = search(step.children)
            if found:
                return found
        return None

    located = search(plan.steps)
    if located is None:
        raise PlanError(f"unknown step id: {step_id}")
    return located


def apply_plan_edit(plan: Plan, edit: dict) -> Plan:
    """Apply one reviewer edit to the plan, renumbering ordinals after
    structural changes. While any step has started, only set-binding-level is
    allowed, and only on steps still pending."""
    op = edit.get("op")
    if op not in EDIT_OPS:
        raise PlanError(f"unknown edit op: {op!r}")
    under_execution = any(s.status != "pending" for s in walk_steps(plan.steps))
    if under_execution and op != "set-binding-level":
        raise PlanError("plan is under execution; structural edits are locked")

    if op == "retitle":
        siblings, index = _locate(plan, edit["step_id"])
        title = edit.get("title", "").strip()
        if not title:
            raise PlanError("title must be non-empty")
        siblings[index].title = title
        return plan

    if op == "delete":
        siblings, index = _locate(plan, edit["step_id"])
        del siblings[index]
        _renumber(plan.steps)
        return plan

    if op == "insert":
        parent_id = edit.get("parent_id")
        children = plan.steps
        if parent_id is not None:
            siblings, index = _locate(plan, parent_id)
            children = siblings[index].children
        at = edit.get("index", len(children))
        if not (0 <= at <= len(children)):
            raise PlanError(f"insert index out of range: {at}")
        title = edit.get("title", "").strip()
        if not title:
            raise PlanError("title must be non-empty")
        children.insert(at, Step(id="step-new", title=title, details=list(edit.get("details", []))))
        _renumber(plan.steps)
        return plan

    if op == "reorder":
        parent_id = edit.get("parent_id")
        children = plan.steps
        if parent_id is not None:
            siblings, index = _locate(plan, parent_id)
            children = siblings[index].children
        order = edit.get("order", [])
        if sorted(order) != sorted(s.id for s in children):
            raise PlanError("order must be a permutation of the children")
        by_id = {s.id: s for s in children}
        children[:] = [by_id[sid] for sid in order]
        _renumber(plan.steps)
        return plan

    siblings, index = _locate(plan, edit["step_id"])
    step = siblings[index]
    rule_id = edit.get("rule_id", "")

    if op == "add-binding":
        if any(b.rule_id == rule_id for b in step.bindings):
            raise PlanError(f"rule already bound to {step.id}: {rule_id}")
        level = edit.get("level", "non-strict")
        if level not in ENFORCEMENT_LEVELS:
            raise PlanError(f"bad binding level: {level!r}")
        step.bindings.append(
            RuleBinding(rule_id=rule_id, level=level, rationale=edit.get("rationale", ""))
        )
        return plan

    if op == "remove-binding":
        remaining = [b for b in step.bindings if b.rule_id != rule_id]
        if len(remaining) == len(step.bindings):
            raise PlanError(f"rule not bound to {step.id}: {rule_id}")
        step.bindings[:] = remaining
        return plan

    # set-binding-level
    if step.status != "pending":
        raise PlanError("binding level can only change while the step is pending")
    level = edit.get("level", "")
    if level not in ENFORCEMENT_LEVELS:
        raise PlanError(f"bad binding level: {level!r}")
    for binding in step.bindings:
        if binding.rule_id == rule_id:
            binding.level = level
            return plan
    raise PlanError(f"rule not bound to {step.id}: {rule_id}")
