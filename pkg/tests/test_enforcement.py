"""Gate mechanics in isolation: the test runner, the refusal message, the
unverified-rule computation, and the supervision templates.

Expected values are hand-derived: exit-code fixtures drive the runner, the
refusal text is pinned byte-for-byte, and unverified sets are recomputed with
an inline set difference.
"""

import os
import sys
import time
from datetime import datetime, timedelta, timezone

import pytest

from zoro.enforcement import (
    OUTPUT_CAP,
    PROTOCOL_REMINDER,
    TRUNCATION_MARKER,
    GateError,
    MalformedError,
    format_gate_error,
    run_rule_test,
    supervision_summary,
    unverified_rules,
)
from zoro.enforcement import TestResult as RuleTestResult
from zoro.plans import Plan, RuleBinding, Step
from zoro.rules import RuleSet, make_rule


def quoted_python(code: str) -> str:
    return f'"{sys.executable}" -c "{code}"'


class TestRunRuleTest:
    def test_exit_zero_passes(self, tmp_path):
        result = run_rule_test("exit 0", str(tmp_path))
        assert result.status == "passed", result
        assert result.exit_code == 0
        assert result.reason is None
        assert result.runs == 1
        assert result.execution_time >= 0.0

    def test_exit_one_fails(self, tmp_path):
        result = run_rule_test("exit 1", str(tmp_path))
        assert result.status == "failed"
        assert result.exit_code == 1
        assert result.reason is None

    def test_status_tracks_exit_code_exactly(self, tmp_path):
        # the one and only source of truth for pass/fail
        for code in (0, 1, 2, 7, 77):
            result = run_rule_test(f"exit {code}", str(tmp_path))
            expected = "passed" if code == 0 else "failed"
            assert result.status == expected, f"exit {code} -> {result.status}"
            assert result.exit_code == code

    def test_stdout_and_stderr_captured(self, tmp_path):
        result = run_rule_test("echo out-line; echo err-line 1>&2; exit 1", str(tmp_path))
        assert "out-line" in result.captured_output
        assert "err-line" in result.captured_output

    def test_command_runs_in_workdir(self, tmp_path):
        result = run_rule_test(quoted_python("import os; print(os.getcwd())"), str(tmp_path))
        assert os.path.realpath(result.captured_output.strip()) == os.path.realpath(str(tmp_path))

    def test_large_output_clipped_head_kept(self, tmp_path):
        result = run_rule_test(quoted_python("print('x' * 100000)"), str(tmp_path))
        assert result.captured_output.endswith(TRUNCATION_MARKER)
        assert len(result.captured_output) == OUTPUT_CAP + len(TRUNCATION_MARKER)
        assert result.captured_output[:200] == "x" * 200
        assert result.status == "passed"

    def test_small_output_not_clipped(self, tmp_path):
        result = run_rule_test("echo tiny", str(tmp_path))
        assert result.captured_output == "tiny\n"

    def test_timeout_kills_and_reports(self, tmp_path):
        start = time.monotonic()
        result = run_rule_test(
            quoted_python("import time; time.sleep(30)"), str(tmp_path), timeout=0.5
        )
        wall = time.monotonic() - start
        assert result.status == "failed"
        assert result.reason == "timeout"
        assert result.exit_code is None
        assert result.execution_time >= 0.5
        assert wall < 10.0, f"runner did not kill the command ({wall:.1f}s)"

    def test_missing_workdir_is_spawn_failure(self, tmp_path):
        result = run_rule_test("exit 0", str(tmp_path / "not-created"))
        assert result.status == "failed"
        assert result.reason == "spawn"

    def test_engine_env_vars_stripped(self, tmp_path, monkeypatch):
        monkeypatch.setenv("ZORO_PROBE", "leaky")
        monkeypatch.setenv("KEEPME_PROBE", "visible")
        code = "import os; print(os.environ.get('ZORO_PROBE', 'absent'), os.environ.get('KEEPME_PROBE', 'absent'))"
        result = run_rule_test(quoted_python(code), str(tmp_path))
        assert result.captured_output.strip() == "absent visible"

    def test_runs_counter_increments(self, tmp_path):
        result = run_rule_test("exit 0", str(tmp_path), previous_runs=2)
        assert result.runs == 3

    def test_empty_command_rejected(self, tmp_path):
        with pytest.raises(MalformedError):
            run_rule_test("", str(tmp_path))
        with pytest.raises(MalformedError):
            run_rule_test("   ", str(tmp_path))

    def test_nonpositive_timeout_rejected(self, tmp_path):
        with pytest.raises(MalformedError):
            run_rule_test("exit 0", str(tmp_path), timeout=0)

    def test_result_round_trips(self, tmp_path):
        result = run_rule_test("echo ok", str(tmp_path))
        assert RuleTestResult.from_dict(result.to_dict()) == result


class TestGateErrorFormat:
    def test_single_rule_text_pinned(self):
        text = format_gate_error(
            "step-1.1",
            [("rule-b", "Ensure all schema changes properly backfill or migrate existing data")],
        )
        expected = (
            "Error: Cannot mark step-1.1 as complete.\n"
            "Unverified rules:\n"
            "rule-b (Ensure all schema changes properly backfill or migrate existing data)\n"
            "Please verify all strict rules using `zoro prove-rule` before completing the step."
        )
        assert text == expected

    def test_multiple_rules_one_line_each_in_order(self):
        text = format_gate_error("step-2", [("rule-a", "Alpha"), ("rule-b", "Beta")])
        lines = text.split("\n")
        assert lines[0] == "Error: Cannot mark step-2 as complete."
        assert lines[1] == "Unverified rules:"
        assert lines[2] == "rule-a (Alpha)"
        assert lines[3] == "rule-b (Beta)"
        assert lines[4].startswith("Please verify all strict rules")
        assert len(lines) == 5

    def test_exception_carries_fields_and_message(self):
        err = GateError("step-3", [("rule-x", "X marks")])
        assert err.step_id == "step-3"
        assert err.unverified == [("rule-x", "X marks")]
        assert str(err) == format_gate_error("step-3", [("rule-x", "X marks")])

    def test_empty_unverified_rejected(self):
        with pytest.raises(ValueError):
            GateError("step-1", [])


def three_level_step() -> tuple[Step, RuleSet]:
    rs = RuleSet()
    a = make_rule("safety", "Alpha checks guard every request edge case")
    b = make_rule("safety", "Beta migrations backfill existing data rows")
    c = make_rule("style", "Gamma naming stays consistent across modules")
    for rule in (a, b, c):
        rs.rules[rule.id] = rule
    step = Step(
        id="step-1.1",
        title="Wire it up",
        bindings=[
            RuleBinding(rule_id=a.id, level="strict"),
            RuleBinding(rule_id=b.id, level="testable"),
            RuleBinding(rule_id=c.id, level="non-strict"),
        ],
    )
    return step, rs


class TestUnverifiedRules:
    def oracle(self, step, rs, verified):
        gating = ("strict", "testable")
        return [
            (binding.rule_id, rs.rules[binding.rule_id].title)
            for binding in step.bindings
            if binding.level in gating and binding.rule_id not in verified
        ]

    def test_no_proofs_lists_gating_bindings_in_order(self):
        step, rs = three_level_step()
        got = unverified_rules(step, rs, set())
        assert got == self.oracle(step, rs, set())
        assert len(got) == 2

    def test_partial_proof_set_difference(self):
        step, rs = three_level_step()
        strict_id = step.bindings[0].rule_id
        got = unverified_rules(step, rs, {strict_id})
        assert got == self.oracle(step, rs, {strict_id})
        assert [rid for rid, _ in got] == [step.bindings[1].rule_id]

    def test_all_proved_is_empty(self):
        step, rs = three_level_step()
        verified = {b.rule_id for b in step.bindings}
        assert unverified_rules(step, rs, verified) == []

    def test_advisory_only_step_is_empty(self):
        step, rs = three_level_step()
        step.bindings = [b for b in step.bindings if b.level == "non-strict"]
        assert unverified_rules(step, rs, set()) == []

    def test_titles_fall_back_to_rule_id(self):
        step, rs = three_level_step()
        step.bindings.append(RuleBinding(rule_id="rule-gone", level="strict"))
        got = unverified_rules(step, rs, set())
        assert ("rule-gone", "rule-gone") in got


def iso_minutes_ago(minutes: float) -> str:
    return (datetime.now(timezone.utc) - timedelta(minutes=minutes)).isoformat()


def watched_plan() -> Plan:
    children = [
        Step(id="step-1.1", title="Add the model"),
        Step(id="step-1.2", title="Add the service"),
        Step(id="step-1.3", title="Add the view"),
    ]
    return Plan(
        id="plan-x",
        source="agent-log",
        created_at=iso_minutes_ago(10),
        source_hash="h",
        steps=[Step(id="step-1", title="Foundation", children=children)],
    )


def summarize(plan, **overrides):
    kwargs = dict(
        gate_error_counts={},
        last_event_at=iso_minutes_ago(0),
        stall_window_seconds=600,
        verified_counts={},
    )
    kwargs.update(overrides)
    return supervision_summary(plan, **kwargs)


class TestSupervision:
    def test_fresh_session_text_pinned(self):
        report = summarize(watched_plan())
        assert report["summary"] == "On track — awaiting step-1"
        assert report["deviation"] is False
        assert report["reason"] is None

    def test_no_plan_yet(self):
        report = summarize(None)
        assert report["summary"] == "On track — awaiting step-1"
        assert report["deviation"] is False

    def test_completed_step_text_pinned(self):
        plan = watched_plan()
        plan.steps[0].status = "in-progress"
        plan.steps[0].children[0].status = "complete"
        report = summarize(plan, verified_counts={"step-1.1": 2})
        assert report["summary"] == (
            "On track — completed step-1.1, verified 2 strict rules, moving to step-1.2"
        )
        assert report["deviation"] is False

    def test_in_progress_leaf_reported(self):
        plan = watched_plan()
        plan.steps[0].status = "in-progress"
        plan.steps[0].children[0].status = "in-progress"
        report = summarize(plan)
        assert report["summary"] == "On track — working on step-1.1"

    def test_all_steps_complete(self):
        plan = watched_plan()
        for step in [plan.steps[0]] + plan.steps[0].children:
            step.status = "complete"
        report = summarize(plan)
        assert report["summary"] == "On track — all steps complete"

    def test_three_gate_errors_on_open_step_flagged(self):
        plan = watched_plan()
        plan.steps[0].status = "in-progress"
        plan.steps[0].children[0].status = "in-progress"
        report = summarize(plan, gate_error_counts={"step-1.1": 3})
        assert report["deviation"] is True
        assert "repeated gate failures" in report["reason"]
        assert report["summary"].startswith("Needs attention — ")

    def test_two_gate_errors_not_flagged(self):
        plan = watched_plan()
        plan.steps[0].status = "in-progress"
        report = summarize(plan, gate_error_counts={"step-1.1": 2})
        assert report["deviation"] is False

    def test_gate_errors_on_completed_step_forgiven(self):
        plan = watched_plan()
        plan.steps[0].status = "in-progress"
        plan.steps[0].children[0].status = "complete"
        report = summarize(plan, gate_error_counts={"step-1.1": 5})
        assert report["deviation"] is False

    def test_stall_window_flagged(self):
        plan = watched_plan()
        plan.steps[0].status = "in-progress"
        report = summarize(plan, last_event_at=iso_minutes_ago(20), stall_window_seconds=600)
        assert report["deviation"] is True
        assert "stall" in report["reason"]

    def test_recent_activity_not_stalled(self):
        plan = watched_plan()
        plan.steps[0].status = "in-progress"
        report = summarize(plan, last_event_at=iso_minutes_ago(1), stall_window_seconds=600)
        assert report["deviation"] is False

    def test_fresh_session_never_stalls(self):
        # nothing has started, so silence is expected
        report = summarize(watched_plan(), last_event_at=iso_minutes_ago(60))
        assert report["deviation"] is False

    def test_skipped_top_level_step_flagged(self):
        plan = Plan(
            id="plan-y",
            source="agent-log",
            created_at=iso_minutes_ago(5),
            source_hash="h2",
            steps=[
                Step(id="step-1", title="First"),
                Step(id="step-2", title="Second", status="complete"),
            ],
        )
        report = summarize(plan)
        assert report["deviation"] is True
        assert "skip" in report["reason"]


class TestProtocolReminder:
    def test_reminder_line_shape(self):
        assert PROTOCOL_REMINDER.startswith("Protocol: ")
        assert "\n" not in PROTOCOL_REMINDER
        assert "zoro update-step" in PROTOCOL_REMINDER
        assert "zoro prove-rule" in PROTOCOL_REMINDER
