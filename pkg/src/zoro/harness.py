"""Scripted-agent simulation harness.

Replays a probabilistic agent through the real session machinery under
four visibility conditions and scores per-instance rule adherence:

- ``baseline``: the plan is ingested but never enriched or marked.
- ``basic``: steps are marked in-progress/complete, no enrichment.
- ``partial``: the plan is enriched, but the completion gate stays off.
- ``full``: enrichment plus the live completion gate.

The agent follows each applicable (step, rule) instance with probability
``p_visible`` when the rule is bound to that step in an enriched plan,
and ``p_hidden`` otherwise. Under ``full`` a refused completion raises
the real gate error; an obedient agent then redraws the violated rules
and retries, so every gated rule ends followed unless the trial blocks.

Each trial runs against a throwaway workspace on disk: nothing here
stubs out enrichment, step ordering, evidence, or the gate.
"""

import json
import math
import statistics
import tempfile
from dataclasses import dataclass, replace
from pathlib import Path
from random import Random

from .enforcement import GATING_LEVELS, GateError, MalformedError
from .plans import deterministic_match, ingest_plan, walk_steps
from .rules import RuleSet
from .session import Session
from .workspace import init_workspace

CONDITIONS = ("baseline", "basic", "partial", "full")
ENRICHED_CONDITIONS = ("partial", "full")

_AGENT_FIELDS = ("p_hidden", "p_visible", "obeys_gate", "rng_seed")


@dataclass(frozen=True)
class ScriptedAgent:
    """Behavior knobs for one simulated agent.

    ``p_hidden`` is the chance of following a rule the agent cannot see;
    ``p_visible`` applies once enrichment puts the rule on the step.
    The same seed always reproduces the same trial byte for byte.
    """

    p_hidden: float
    p_visible: float
    obeys_gate: bool = True
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("p_hidden", "p_visible"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise MalformedError(f"{name} must be a number in [0, 1]")
            if not 0.0 <= value <= 1.0:
                raise MalformedError(f"{name} must be in [0, 1], got {value!r}")
        if not isinstance(self.obeys_gate, bool):
            raise MalformedError("obeys_gate must be true or false")
        if isinstance(self.rng_seed, bool) or not isinstance(self.rng_seed, int):
            raise MalformedError("rng_seed must be an integer")

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in _AGENT_FIELDS}

    @classmethod
    def from_dict(cls, data: dict) -> "ScriptedAgent":
        if not isinstance(data, dict):
            raise MalformedError("agent parameters must be an object")
        missing = [name for name in _AGENT_FIELDS if name not in data]
        if missing:
            raise MalformedError(f"agent parameters missing {', '.join(missing)}")
        return cls(**{name: data[name] for name in _AGENT_FIELDS})

    @classmethod
    def from_file(cls, path: Path | str) -> "ScriptedAgent":
        try:
            data = json.loads(Path(path).read_text("utf-8"))
        except OSError as exc:
            raise MalformedError(f"cannot read agent parameters: {exc}") from exc
        except ValueError as exc:
            raise MalformedError(f"agent parameters are not valid JSON: {exc}") from exc
        return cls.from_dict(data)


@dataclass
class TrialReport:
    """Outcome of one simulated trial.

    ``per_rule`` aggregates the instance trace; a rule counts as followed
    only when every one of its instances was followed. ``trace`` keeps the
    raw per-instance outcomes so scores can be recounted independently.
    """

    condition: str
    seed: int
    rules_followed: float
    strict_rules_followed: float
    steps_completed: float
    gate_errors: int
    blocked: bool
    per_rule: dict
    trace: list

    def to_dict(self) -> dict:
        return {
            "condition": self.condition,
            "seed": self.seed,
            "rules_followed": self.rules_followed,
            "strict_rules_followed": self.strict_rules_followed,
            "steps_completed": self.steps_completed,
            "gate_errors": self.gate_errors,
            "blocked": self.blocked,
            "per_rule": self.per_rule,
            "trace": self.trace,
        }


class _TrialBlocked(Exception):
    """Internal: the agent gave up (or ran out of retries) at the gate."""


def _score(trace: list) -> tuple[float, float, dict]:
    per_rule: dict = {}
    for inst in trace:
        slot = per_rule.setdefault(
            inst["rule_id"],
            {"instances": 0, "followed_instances": 0, "followed": True, "level": inst["level"]},
        )
        slot["instances"] += 1
        if inst["followed"]:
            slot["followed_instances"] += 1
        else:
            slot["followed"] = False
    scored = list(per_rule.values())
    rules_followed = (
        sum(1 for s in scored if s["followed"]) / len(scored) if scored else 1.0
    )
    gating = [s for s in scored if s["level"] in GATING_LEVELS]
    strict = (
        sum(1 for s in gating if s["followed"]) / len(gating) if gating else 1.0
    )
    return rules_followed, strict, per_rule


class _TrialRun:
    def __init__(self, ruleset, agent, condition, session, plan, max_gate_retries):
        self.ruleset = ruleset
        self.agent = agent
        self.condition = condition
        self.session = session
        self.rng = Random(agent.rng_seed)
        self.max_gate_retries = max_gate_retries
        self.marking = condition != "baseline"
        self.gate_errors = 0
        self.completed = 0
        self.trace: list = []
        # ground truth applicability, independent of what the agent can see
        self.applicable = {
            step.id: [(b.rule_id, b.level) for b in deterministic_match(step, ruleset)]
            for step in walk_steps(plan.steps)
        }
        # rules the agent can actually see on each step
        self.bound = set()
        if condition in ENRICHED_CONDITIONS:
            for step in walk_steps(session.plan.steps):
                for binding in step.bindings:
                    self.bound.add((step.id, binding.rule_id))

    def _draw(self, step_id: str, rule_id: str) -> bool:
        p = (
            self.agent.p_visible
            if (step_id, rule_id) in self.bound
            else self.agent.p_hidden
        )
        return self.rng.random() < p

    def _prove(self, step_id: str, rule_id: str, level: str) -> None:
        title = self.ruleset.rules[rule_id].title
        command = "true" if level == "testable" else None
        self.session.prove_rule(
            step_id,
            rule_id,
            summary=f"confirmed {title} while working {step_id}",
            test_command=command,
        )

    def visit(self, step) -> None:
        if self.marking:
            self.session.update_step(step.id, "in-progress")
        for child in step.children:
            self.visit(child)
        outcomes = {}
        for rule_id, level in self.applicable.get(step.id, []):
            outcomes[rule_id] = [level, self._draw(step.id, rule_id)]
        if self.condition == "full":
            self._complete_gated(step, outcomes)
        elif self.marking:
            self.session.update_step(step.id, "complete")
        for rule_id, (level, followed) in outcomes.items():
            self.trace.append(
                {"step_id": step.id, "rule_id": rule_id, "level": level, "followed": followed}
            )
        self.completed += 1

    def _complete_gated(self, step, outcomes) -> None:
        proven = set()
        for attempt in range(self.max_gate_retries + 1):
            for rule_id, (level, followed) in outcomes.items():
                if level in GATING_LEVELS and followed and rule_id not in proven:
                    self._prove(step.id, rule_id, level)
                    proven.add(rule_id)
            try:
                self.session.update_step(step.id, "complete")
                return
            except GateError:
                self.gate_errors += 1
                if not self.agent.obeys_gate or attempt == self.max_gate_retries:
                    # record the losing draws before giving up
                    for rule_id, (level, followed) in outcomes.items():
                        self.trace.append(
                            {
                                "step_id": step.id,
                                "rule_id": rule_id,
                                "level": level,
                                "followed": followed,
                            }
                        )
                    raise _TrialBlocked()
                for rule_id, slot in outcomes.items():
                    level, followed = slot
                    if level in GATING_LEVELS and not followed:
                        slot[1] = self._draw(step.id, rule_id)


def run_trial(
    plan_text: str,
    ruleset: RuleSet,
    agent: ScriptedAgent,
    condition: str,
    *,
    root: Path | str | None = None,
    max_gate_retries: int = 1000,
) -> TrialReport:
    """Run one trial in a fresh workspace and score the instance trace."""
    if condition not in CONDITIONS:
        raise MalformedError(
            f"unknown condition {condition!r}; expected one of {', '.join(CONDITIONS)}"
        )
    plan = ingest_plan(plan_text)
    if plan is None:
        raise MalformedError("no plan found in the log")
    if root is None:
        with tempfile.TemporaryDirectory(prefix="zoro-trial-") as tmp:
            return _run_in_root(Path(tmp), plan_text, plan, ruleset, agent, condition, max_gate_retries)
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    return _run_in_root(root, plan_text, plan, ruleset, agent, condition, max_gate_retries)


def _run_in_root(root, plan_text, plan, ruleset, agent, condition, max_gate_retries):
    ws = init_workspace(root, "harness")
    ws.save_rules(ruleset)
    session = Session.create(ws, enforce_gate=(condition == "full"))
    session.ingest_log(plan_text)
    if condition in ENRICHED_CONDITIONS:
        session.enrich()

    run = _TrialRun(ruleset, agent, condition, session, plan, max_gate_retries)
    blocked = False
    try:
        for top in session.plan.steps:
            run.visit(top)
    except _TrialBlocked:
        blocked = True

    total_steps = len(list(walk_steps(plan.steps)))
    rules_followed, strict, per_rule = _score(run.trace)
    return TrialReport(
        condition=condition,
        seed=agent.rng_seed,
        rules_followed=rules_followed,
        strict_rules_followed=strict,
        steps_completed=run.completed / total_steps if total_steps else 1.0,
        gate_errors=run.gate_errors,
        blocked=blocked,
        per_rule=per_rule,
        trace=run.trace,
    )


def compare_conditions(
    plan_text: str, ruleset: RuleSet, agent: ScriptedAgent, n_trials: int
) -> dict:
    """Run ``n_trials`` seeded trials per condition and summarize adherence.

    Trial ``i`` of every condition reuses seed ``rng_seed + i``, so the
    comparison is paired and fully reproducible.
    """
    if isinstance(n_trials, bool) or not isinstance(n_trials, int) or n_trials < 1:
        raise MalformedError("n_trials must be a positive integer")
    conditions = {
        condition: summarize_reports(run_trials(plan_text, ruleset, agent, condition, n_trials))
        for condition in CONDITIONS
    }
    return {"n_trials": n_trials, "agent": agent.to_dict(), "conditions": conditions}


def run_trials(
    plan_text: str, ruleset: RuleSet, agent: ScriptedAgent, condition: str, n_trials: int
) -> list[TrialReport]:
    """Run trial ``i`` with seed ``rng_seed + i`` so batches are reproducible."""
    return [
        run_trial(plan_text, ruleset, replace(agent, rng_seed=agent.rng_seed + i), condition)
        for i in range(n_trials)
    ]


def summarize_reports(reports: list[TrialReport]) -> dict:
    n = len(reports)
    followed = [r.rules_followed for r in reports]
    mean = statistics.fmean(followed)
    sd = statistics.stdev(followed) if n > 1 else 0.0
    return {
        "mean_rules_followed": mean,
        "sd_rules_followed": sd,
        "ci95": 1.96 * sd / math.sqrt(n),
        "mean_steps_completed": statistics.fmean(r.steps_completed for r in reports),
        "mean_gate_errors": statistics.fmean(r.gate_errors for r in reports),
        "strict_rules_followed_mean": statistics.fmean(
            r.strict_rules_followed for r in reports
        ),
        "blocked_trials": sum(1 for r in reports if r.blocked),
    }


def format_comparison(result: dict) -> str:
    """Render a compare_conditions result as an aligned plain-text table."""
    header = (
        f"{'condition':<10}  {'rules_followed':<16}  {'steps_completed':>15}  "
        f"{'gate_errors':>11}  {'strict':>6}"
    )
    lines = [header]
    for condition in (c for c in CONDITIONS if c in result["conditions"]):
        stats = result["conditions"][condition]
        cell = f"{stats['mean_rules_followed']:5.3f} ± {stats['ci95']:5.3f}"
        lines.append(
            f"{condition:<10}  {cell:<16}  {stats['mean_steps_completed']:>15.3f}  "
            f"{stats['mean_gate_errors']:>11.2f}  {stats['strict_rules_followed_mean']:>6.3f}"
        )
    return "\n".join(lines)
