"""Gate mechanics: run rule tests, compute unverified bindings, refuse step
completion, and summarize progress for the supervising human.

Pass/fail is decided here and only here, from the exit code the engine itself
observed. Nothing in this module accepts a result asserted by the agent.
"""

from __future__ import annotations

import os
import signal
import subprocess
import time
from dataclasses import dataclass
from datetime import datetime, timezone

from .rules import RuleSet
from .util import now_iso

OUTPUT_CAP = 64 * 1024
TRUNCATION_MARKER = "\n[truncated]"

GATING_LEVELS = ("strict", "testable")

PROTOCOL_REMINDER = (
    "Protocol: mark progress with `zoro update-step`, submit evidence with "
    "`zoro prove-rule`; a step cannot complete while strict rules lack "
    "verified evidence."
)


class EngineError(Exception):
    """Base for engine errors; exit_code is what the CLI surface reports."""

    exit_code = 2


class ProtocolError(EngineError):
    exit_code = 2


class OrderingError(ProtocolError):
    pass


class BindingError(ProtocolError):
    pass


class StateError(ProtocolError):
    pass


class UnknownIdError(EngineError):
    exit_code = 3


class MalformedError(EngineError):
    exit_code = 5


def format_gate_error(step_id: str, unverified: list[tuple[str, str]]) -> str:
    lines = [f"Error: Cannot mark {step_id} as complete.", "Unverified rules:"]
    lines.extend(f"{rule_id} ({title})" for rule_id, title in unverified)
    lines.append(
        "Please verify all strict rules using `zoro prove-rule` before completing the step."
    )
    return "\n".join(lines)


class GateError(ProtocolError):
    def __init__(self, step_id: str, unverified: list[tuple[str, str]]):
        if not unverified:
            raise ValueError("a gate refusal needs at least one unverified rule")
        self.step_id = step_id
        self.unverified = list(unverified)
        super().__init__(format_gate_error(step_id, self.unverified))


class ProofFailed(ProtocolError):
    """A testable proof whose test failed; the record is stored regardless so
    the retry history survives."""

    def __init__(self, message: str, record: dict):
        self.record = record
        super().__init__(message)


@dataclass
class TestResult:
    command: str
    status: str  # passed | failed
    execution_time: float
    runs: int
    captured_output: str
    reason: str | None = None  # timeout | spawn
    exit_code: int | None = None

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "status": self.status,
            "execution_time": self.execution_time,
            "runs": self.runs,
            "captured_output": self.captured_output,
            "reason": self.reason,
            "exit_code": self.exit_code,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TestResult":
        return cls(
            command=data["command"],
            status=data["status"],
            execution_time=data["execution_time"],
            runs=data["runs"],
            captured_output=data["captured_output"],
            reason=data.get("reason"),
            exit_code=data.get("exit_code"),
        )


def _clip(text: str) -> str:
    if len(text) <= OUTPUT_CAP:
        return text
    return text[:OUTPUT_CAP] + TRUNCATION_MARKER


def run_rule_test(
    command: str,
    workdir: str,
    timeout: float = 120.0,
    previous_runs: int = 0,
) -> TestResult:
    """Execute a rule's test command in the repo working directory and report
    what actually happened: exit code, wall time, combined output (capped).

    The child gets the caller's environment minus engine-internal variables,
    and its own process group so a timeout can kill the whole tree."""
    if not command or not command.strip():
        raise MalformedError("test command must be non-empty")
    if timeout <= 0:
        raise MalformedError("test timeout must be positive")
    env = {k: v for k, v in os.environ.items() if not k.startswith("ZORO_")}
    runs = previous_runs + 1
    start = time.monotonic()
    try:
        proc = subprocess.Popen(
            command,
            shell=True,
            cwd=workdir,
            env=env,
            stdout=subprocess.PIPE,
            stderr=subprocess.STDOUT,
            start_new_session=True,
        )
    except OSError as exc:
        return TestResult(
            command=command,
            status="failed",
            execution_time=time.monotonic() - start,
            runs=runs,
            captured_output=_clip(str(exc)),
            reason="spawn",
        )
    try:
        stdout, _ = proc.communicate(timeout=timeout)
        elapsed = time.monotonic() - start
        output = _clip(stdout.decode("utf-8", errors="replace"))
        return TestResult(
            command=command,
            status="passed" if proc.returncode == 0 else "failed",
            execution_time=elapsed,
            runs=runs,
            captured_output=output,
            exit_code=proc.returncode,
        )
    except subprocess.TimeoutExpired:
        try:
            os.killpg(proc.pid, signal.SIGKILL)
        except (ProcessLookupError, PermissionError):
            pass
        stdout, _ = proc.communicate()
        elapsed = time.monotonic() - start
        partial = stdout.decode("utf-8", errors="replace") if stdout else ""
        return TestResult(
            command=command,
            status="failed",
            execution_time=elapsed,
            runs=runs,
            captured_output=_clip(partial),
            reason="timeout",
        )


def unverified_rules(step, ruleset: RuleSet, verified_ids: set[str]) -> list[tuple[str, str]]:
    """Strict and testable bindings of the step lacking verified evidence, in
    binding order, with rule titles for the refusal message."""
    out = []
    for binding in step.bindings:
        if binding.level not in GATING_LEVELS or binding.rule_id in verified_ids:
            continue
        rule = ruleset.rules.get(binding.rule_id)
        out.append((binding.rule_id, rule.title if rule else binding.rule_id))
    return out


# --- supervision --------------------------------------------------------------


def _leaves(plan) -> list:
    from .plans import walk_steps

    return [s for s in walk_steps(plan.steps) if not s.children]


def _parse_ts(value: str | None) -> datetime | None:
    if not value:
        return None
    try:
        return datetime.fromisoformat(value)
    except ValueError:
        return None


def supervision_summary(
    plan,
    *,
    gate_error_counts: dict,
    last_event_at: str | None,
    stall_window_seconds: int,
    verified_counts: dict,
    now: str | None = None,
) -> dict:
    """One deterministic status line plus a deviation flag.

    Deviations, in priority order: a top-level step finished while an earlier
    one had not, repeated gate refusals (three or more) on a step that is
    still open, or silence past the stall window once work has started."""
    started = plan is not None and any(
        s.status != "pending" for s in _walk(plan)
    )

    reason = None
    if plan is not None:
        done_earlier = True
        for top in plan.steps:
            if top.status == "complete" and not done_earlier:
                reason = f"{top.id} completed while an earlier step was skipped"
                break
            if top.status != "complete":
                done_earlier = False
    if reason is None and plan is not None:
        status_by_id = {s.id: s.status for s in _walk(plan)}
        for step_id, count in sorted(gate_error_counts.items()):
            if count >= 3 and status_by_id.get(step_id) != "complete":
                reason = f"repeated gate failures on {step_id} ({count} refusals)"
                break
    if reason is None and started:
        last = _parse_ts(last_event_at)
        current = _parse_ts(now) or datetime.now(timezone.utc)
        if last is not None and (current - last).total_seconds() > stall_window_seconds:
            idle = int((current - last).total_seconds())
            reason = f"stalled: no events for {idle}s (window {stall_window_seconds}s)"

    if reason is not None:
        return {"summary": f"Needs attention — {reason}", "deviation": True, "reason": reason}

    if plan is None:
        return {"summary": "On track — awaiting step-1", "deviation": False, "reason": None}
    leaves = _leaves(plan)
    if not started:
        first = plan.steps[0].id if plan.steps else "step-1"
        return {"summary": f"On track — awaiting {first}", "deviation": False, "reason": None}
    in_progress = [s for s in leaves if s.status == "in-progress"]
    if in_progress:
        summary = f"On track — working on {in_progress[0].id}"
        return {"summary": summary, "deviation": False, "reason": None}
    if leaves and all(s.status == "complete" for s in leaves):
        return {"summary": "On track — all steps complete", "deviation": False, "reason": None}
    completed = [s for s in leaves if s.status == "complete"]
    if not completed:
        # a parent opened but no leaf has moved yet
        open_leaf = next((s for s in leaves if s.status != "complete"), None)
        target = open_leaf.id if open_leaf else "step-1"
        return {"summary": f"On track — working on {target}", "deviation": False, "reason": None}
    last_done = completed[-1]
    after = leaves[leaves.index(last_done) + 1 :]
    next_open = next((s for s in after if s.status != "complete"), None)
    if next_open is None:
        next_open = next(s for s in leaves if s.status != "complete")
    verified = verified_counts.get(last_done.id, 0)
    summary = (
        f"On track — completed {last_done.id}, verified {verified} strict rules, "
        f"moving to {next_open.id}"
    )
    return {"summary": summary, "deviation": False, "reason": None}


def _walk(plan):
    from .plans import walk_steps

    return walk_steps(plan.steps)
