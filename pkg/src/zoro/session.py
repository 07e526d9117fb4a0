"""One coding session: the event-sourced aggregate tying a plan, its evidence,
and the gate together.

Every mutation follows the same shape: take the session lock, rebuild state
from the event log, validate, append exactly one event, then persist the
derived documents. The log is the source of truth; state.json, plan.json, and
the evidence files are projections that open() repairs whenever they lag (for
example after a crash between the append and the document writes).
"""

from __future__ import annotations

import copy
from datetime import datetime, timezone
from pathlib import Path
from uuid import uuid4

from .enforcement import (
    PROTOCOL_REMINDER,
    BindingError,
    GateError,
    MalformedError,
    OrderingError,
    ProofFailed,
    ProtocolError,
    StateError,
    UnknownIdError,
    run_rule_test,
    supervision_summary,
    unverified_rules,
)
from .plans import EDIT_OPS, Plan, apply_plan_edit, find_step, ingest_plan, walk_steps
from .plans import PlanError
from .util import now_iso
from .workspace import SCHEMA_VERSION, Workspace, append_log_line, read_log

GATING_LEVELS = ("strict", "testable")

_NEXT_STATE = {"planning": "executing", "executing": "reviewing", "reviewing": "closed"}

_PLAN_EVENTS = ("plan-ingested", "plan-enriched", "plan-edited", "step-status")


def _mint_sid() -> str:
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S")
    return f"s-{stamp}-{uuid4().hex[:4]}"


class Session:
    def __init__(self, workspace: Workspace, sid: str, lock_timeout: float = 10.0):
        self.workspace = workspace
        self.sid = sid
        self.lock_timeout = lock_timeout
        self.doc: dict | None = None
        self.plan: Plan | None = None
        self.evidence: dict[tuple[str, str], list[dict]] = {}
        self.notes: list[dict] = []
        self.proposals: list[dict] = []
        self.candidates: list[dict] = []

    # -- construction

    @classmethod
    def create(
        cls, workspace: Workspace, enforce_gate: bool = True, lock_timeout: float = 10.0
    ) -> "Session":
        sid = _mint_sid()
        while workspace.session_dir(sid).exists():
            sid = _mint_sid()
        session = cls(workspace, sid, lock_timeout)
        (workspace.session_dir(sid) / "evidence").mkdir(parents=True)
        doc = {
            "schema_version": SCHEMA_VERSION,
            "id": sid,
            "state": "planning",
            "ruleset_hash": workspace.load_rules().content_hash(),
            "created_at": now_iso(),
            "enforce_gate": enforce_gate,
            "ingested_plan_hashes": [],
            "gate_error_counts": {},
            "last_event_at": None,
            "last_seq": 0,
        }
        with session._lock():
            session._commit("session-created", {"doc": doc})
        return session

    @classmethod
    def open(cls, workspace: Workspace, sid: str, lock_timeout: float = 10.0) -> "Session":
        session = cls(workspace, sid, lock_timeout)
        if not session._events_path().exists():
            raise UnknownIdError(f"unknown session: {sid}")
        with session._lock():
            session._reload()
            session._repair()
        return session

    # -- paths and plumbing

    def _events_path(self) -> Path:
        return self.workspace.session_dir(self.sid) / "events.log"

    def _rel(self, name: str) -> str:
        return f"sessions/{self.sid}/{name}"

    def _lock(self):
        return self.workspace.session_lock(self.sid, timeout=self.lock_timeout)

    def events(self) -> list[dict]:
        return read_log(self._events_path())

    def walk(self):
        if self.plan is None:
            return iter(())
        return walk_steps(self.plan.steps)

    def refresh(self) -> "Session":
        self._reload()
        return self

    def _config(self) -> dict:
        return self.workspace.read_state("config.json") or {}

    # -- event machinery

    def _reload(self) -> None:
        self.doc = None
        self.plan = None
        self.evidence = {}
        self.notes = []
        self.proposals = []
        self.candidates = []
        for event in self.events():
            self._apply(event)

    def _apply(self, event: dict) -> None:
        etype = event["type"]
        data = event["data"]
        if etype == "session-created":
            self.doc = dict(data["doc"])
        elif etype == "plan-ingested":
            self.plan = Plan.from_dict(data["plan"])
            if self.plan.source_hash not in self.doc["ingested_plan_hashes"]:
                self.doc["ingested_plan_hashes"].append(self.plan.source_hash)
        elif etype == "plan-enriched":
            self.plan = Plan.from_dict(data["plan"])
            if self.plan.ruleset_hash:
                self.doc["ruleset_hash"] = self.plan.ruleset_hash
        elif etype == "plan-edited":
            apply_plan_edit(self.plan, data["edit"])
        elif etype == "step-status":
            step = find_step(self.plan, data["step_id"])
            step.status = data["status"]
            if data["status"] == "in-progress":
                self._promote_ancestors(data["step_id"])
                if self.doc["state"] == "planning":
                    self.doc["state"] = "executing"
        elif etype == "gate-error":
            counts = self.doc["gate_error_counts"]
            counts[data["step_id"]] = counts.get(data["step_id"], 0) + 1
        elif etype == "evidence":
            record = data["record"]
            key = (record["step_id"], record["rule_id"])
            self.evidence.setdefault(key, []).append(record)
        elif etype == "note":
            self.notes.append(data["note"])
        elif etype == "proposals":
            self.proposals = [dict(p) for p in data["proposals"]]
            self.candidates = [dict(c) for c in data["candidates"]]
        elif etype == "proposal-decision":
            for proposal in self.proposals:
                if proposal["id"] == data["proposal_id"]:
                    proposal["status"] = data["status"]
                    if "proposed_text" in data:
                        proposal["proposed_text"] = data["proposed_text"]
        elif etype == "candidate-decision":
            for candidate in self.candidates:
                if candidate["id"] == data["candidate_id"]:
                    candidate["status"] = data["status"]
        elif etype == "session-state":
            self.doc["state"] = data["state"]
        elif etype == "diagnostic":
            pass
        else:
            raise MalformedError(f"unknown event type: {etype}")
        self.doc["last_seq"] = event["seq"]
        self.doc["last_event_at"] = event["at"]

    def _promote_ancestors(self, step_id: str) -> None:
        parts = step_id.removeprefix("step-").split(".")
        for depth in range(1, len(parts)):
            ancestor = find_step(self.plan, "step-" + ".".join(parts[:depth]))
            if ancestor is not None and ancestor.status == "pending":
                ancestor.status = "in-progress"

    def _commit(self, etype: str, data: dict) -> dict:
        """Append one event and persist the projections. Caller holds the
        session lock and has already validated against reloaded state."""
        seq = (self.doc["last_seq"] if self.doc else 0) + 1
        if etype == "evidence":
            data["record"]["event_seq"] = seq
        event = {"seq": seq, "at": now_iso(), "type": etype, "data": data}
        self._apply(event)
        append_log_line(self._events_path(), event)
        self._persist(etype, event)
        return event

    def _persist(self, etype: str, event: dict) -> None:
        self.workspace.write_state(self._rel("state.json"), self.doc)
        if etype in _PLAN_EVENTS and self.plan is not None:
            self.workspace.write_state(self._rel("plan.json"), self.plan.to_dict())
        if etype == "evidence":
            record = event["data"]["record"]
            self.workspace.write_state(self._rel(f"evidence/{record['id']}.json"), record)
        if etype == "note":
            self._write_notes()
        if etype in ("proposals", "proposal-decision", "candidate-decision"):
            self._write_proposals()

    def _write_notes(self) -> None:
        doc = {"schema_version": SCHEMA_VERSION, "notes": self.notes}
        self.workspace.write_state(self._rel("notes.json"), doc)

    def _write_proposals(self) -> None:
        doc = {
            "schema_version": SCHEMA_VERSION,
            "proposals": self.proposals,
            "candidates": self.candidates,
        }
        self.workspace.write_state(self._rel("proposals.json"), doc)

    def _repair(self) -> None:
        ws = self.workspace
        if ws.read_state(self._rel("state.json")) != self.doc:
            ws.write_state(self._rel("state.json"), self.doc)
        if self.plan is not None and ws.read_state(self._rel("plan.json")) != self.plan.to_dict():
            ws.write_state(self._rel("plan.json"), self.plan.to_dict())
        notes_doc = {"schema_version": SCHEMA_VERSION, "notes": self.notes}
        if (self.notes or ws.read_state(self._rel("notes.json")) is not None) and ws.read_state(
            self._rel("notes.json")
        ) != notes_doc:
            ws.write_state(self._rel("notes.json"), notes_doc)
        proposals_doc = {
            "schema_version": SCHEMA_VERSION,
            "proposals": self.proposals,
            "candidates": self.candidates,
        }
        have_any = self.proposals or self.candidates
        on_disk = ws.read_state(self._rel("proposals.json"))
        if (have_any or on_disk is not None) and on_disk != proposals_doc:
            ws.write_state(self._rel("proposals.json"), proposals_doc)
        for records in self.evidence.values():
            for record in records:
                rel = self._rel(f"evidence/{record['id']}.json")
                if ws.read_state(rel) != record:
                    ws.write_state(rel, record)

    # -- guards

    def _require_states(self, *allowed: str) -> None:
        state = self.doc["state"]
        if state not in allowed:
            raise StateError(f"session is {state}; this change needs {' or '.join(allowed)}")

    def _require_plan(self) -> Plan:
        if self.plan is None:
            raise StateError("session has no plan yet")
        return self.plan

    def _find_step(self, step_id: str):
        step = find_step(self._require_plan(), step_id)
        if step is None:
            raise UnknownIdError(f"unknown step id: {step_id}")
        return step

    def _verified_ids(self, step_id: str) -> set[str]:
        return {
            rule_id
            for (sid, rule_id), records in self.evidence.items()
            if sid == step_id and records and records[-1]["verified"]
        }

    # -- plan intake

    def ingest_log(self, text: str, source: str = "agent-log") -> Plan:
        with self._lock():
            self._reload()
            self._require_states("planning")
            plan = ingest_plan(text, source=source)
            if plan is None:
                raise MalformedError("no plan found in the log")
            if plan.source_hash in self.doc["ingested_plan_hashes"]:
                return self.plan
            self._commit("plan-ingested", {"plan": plan.to_dict()})
            return self.plan

    def enrich(self, transport=None) -> Plan:
        from .plans import enrich_plan

        with self._lock():
            self._reload()
            self._require_states("planning")
            plan = self._require_plan()
            if plan.enriched:
                raise ProtocolError("plan is already enriched")
            ruleset = self.workspace.load_rules()
            enriched = enrich_plan(copy.deepcopy(plan), ruleset, transport)
            self._commit("plan-enriched", {"plan": enriched.to_dict()})
            return self.plan

    def edit_plan(self, edit: dict) -> Plan:
        with self._lock():
            self._reload()
            self._require_states("planning", "executing")
            plan = self._require_plan()
            op = edit.get("op")
            if op not in EDIT_OPS:
                raise MalformedError(f"unknown edit op: {op!r}")
            for key in ("step_id", "parent_id"):
                if edit.get(key) is not None and find_step(plan, edit[key]) is None:
                    raise UnknownIdError(f"unknown step id: {edit[key]}")
            under_execution = any(s.status != "pending" for s in walk_steps(plan.steps))
            if under_execution and op != "set-binding-level":
                raise ProtocolError("plan is under execution; structural edits are locked")
            # dry-run on a copy so a rejected edit never enters the event log
            try:
                apply_plan_edit(copy.deepcopy(plan), edit)
            except PlanError as exc:
                if "pending" in str(exc) or "execution" in str(exc):
                    raise ProtocolError(str(exc)) from exc
                raise MalformedError(str(exc)) from exc
            self._commit("plan-edited", {"edit": edit})
            return self.plan

    # -- step progress and the gate

    def update_step(self, step_id: str, status: str) -> dict:
        if status not in ("in-progress", "complete"):
            raise MalformedError(f"status must be in-progress or complete, not {status!r}")
        with self._lock():
            self._reload()
            self._require_states("planning", "executing")
            plan = self._require_plan()
            step = self._find_step(step_id)
            if status == "in-progress" and step.status != "pending":
                raise OrderingError(f"{step_id} is {step.status}; only a pending step can start")
            if status == "complete" and step.status != "in-progress":
                raise OrderingError(f"{step_id} is {step.status}; mark it in-progress first")
            if not self._config().get("allow_out_of_order", False):
                active = next((t for t in plan.steps if t.status != "complete"), None)
                top_id = "step-" + step_id.removeprefix("step-").split(".")[0]
                if active is None:
                    raise OrderingError("all top-level steps are already complete")
                if top_id != active.id:
                    raise OrderingError(
                        f"out of order: {active.id} is the active step; {step_id} must wait"
                    )
            if status == "complete" and step.children:
                open_child = next(
                    (c.id for c in walk_steps(step.children) if c.status != "complete"), None
                )
                if open_child is not None:
                    raise OrderingError(
                        f"cannot complete {step_id}: child {open_child} is not complete"
                    )
            if status == "complete":
                missing = unverified_rules(
                    step, self.workspace.load_rules(), self._verified_ids(step_id)
                )
                if missing and self.doc["enforce_gate"]:
                    self._commit(
                        "gate-error",
                        {"step_id": step_id, "unverified": [list(pair) for pair in missing]},
                    )
                    raise GateError(step_id, missing)
            self._commit("step-status", {"step_id": step_id, "status": status})
            return {
                "ok": True,
                "session": self.sid,
                "step": self._find_step(step_id).to_dict(),
                "reminder": PROTOCOL_REMINDER,
            }

    def prove_rule(
        self,
        step_id: str,
        rule_id: str,
        summary: str,
        artifacts: list | None = None,
        test_command: str | None = None,
        test_timeout: float = 120.0,
    ) -> dict:
        if not summary or not summary.strip():
            raise MalformedError("evidence summary must be non-empty")
        parsed_artifacts = _parse_artifacts(artifacts)
        with self._lock():
            self._reload()
            self._require_states("planning", "executing")
            level, previous_runs = self._validate_proof(step_id, rule_id, test_command)
        result = None
        if level == "testable":
            # the test runs with no lock held; only the commit is serialized
            result = run_rule_test(
                test_command, str(self.workspace.root), test_timeout, previous_runs
            )
        with self._lock():
            self._reload()
            level, _ = self._validate_proof(step_id, rule_id, test_command)
            warnings = self._artifact_warnings(parsed_artifacts)
            if level != "testable" and test_command:
                warnings.append(f"test command ignored for {level} binding")
            verified = result.status == "passed" if level == "testable" else True
            record = {
                "schema_version": SCHEMA_VERSION,
                "id": "ev-" + uuid4().hex[:12],
                "session_id": self.sid,
                "step_id": step_id,
                "rule_id": rule_id,
                "level": level,
                "summary": summary,
                "artifacts": parsed_artifacts,
                "verified": verified,
                "advisory": level == "non-strict",
                "submitted_at": now_iso(),
                "test": result.to_dict() if result is not None else None,
                "warnings": warnings,
                "event_seq": 0,
            }
            self._commit("evidence", {"record": record})
        if level == "testable" and not verified:
            detail = result.reason or f"exit {result.exit_code}"
            raise ProofFailed(
                f"test failed for {rule_id} on {step_id} ({detail}); "
                "the record was stored, fix and prove again",
                record,
            )
        return record

    def _validate_proof(self, step_id, rule_id, test_command) -> tuple[str, int]:
        step = self._find_step(step_id)
        if rule_id not in self.workspace.load_rules().rules:
            raise UnknownIdError(f"unknown rule: {rule_id}")
        binding = next((b for b in step.bindings if b.rule_id == rule_id), None)
        if binding is None:
            raise BindingError(f"rule {rule_id} is not bound to {step_id}")
        if step.status != "in-progress":
            raise ProtocolError(f"{step_id} is {step.status}; proofs need an in-progress step")
        if binding.level == "testable" and not (test_command and test_command.strip()):
            raise MalformedError(f"test required: {rule_id} is a testable binding")
        records = self.evidence.get((step_id, rule_id), [])
        previous_runs = next(
            (r["test"]["runs"] for r in reversed(records) if r.get("test")), 0
        )
        return binding.level, previous_runs

    def _artifact_warnings(self, artifacts: list[dict]) -> list[str]:
        warnings = []
        for artifact in artifacts:
            if not (self.workspace.root / artifact["path"]).exists():
                warnings.append(f"artifact path not found: {artifact['path']}")
        return warnings

    # -- read models

    def unverified(self, step_id: str) -> list[tuple[str, str]]:
        step = self._find_step(step_id)
        return unverified_rules(step, self.workspace.load_rules(), self._verified_ids(step_id))

    def supervision(self, now: str | None = None) -> dict:
        verified_counts = {}
        for step in self.walk():
            gating = [b for b in step.bindings if b.level in GATING_LEVELS]
            verified = self._verified_ids(step.id)
            verified_counts[step.id] = sum(1 for b in gating if b.rule_id in verified)
        return supervision_summary(
            self.plan,
            gate_error_counts=self.doc["gate_error_counts"],
            last_event_at=self.doc["last_event_at"],
            stall_window_seconds=self._config().get("stall_window_seconds", 600),
            verified_counts=verified_counts,
            now=now,
        )

    # -- lifecycle

    def advance_state(self, target: str) -> dict:
        with self._lock():
            self._reload()
            current = self.doc["state"]
            if _NEXT_STATE.get(current) != target:
                raise StateError(f"cannot move session from {current} to {target}")
            self._commit("session-state", {"state": target})
            return dict(self.doc)

    # -- shared commit surface for the evolution layer

    def commit(self, etype: str, data: dict, validate=None) -> dict:
        """Append one event after revalidating against freshly reloaded state;
        `validate` runs under the lock and may raise to abort."""
        with self._lock():
            self._reload()
            if validate is not None:
                validate(self)
            return self._commit(etype, data)


def _parse_artifacts(items) -> list[dict]:
    out = []
    for item in items or []:
        if isinstance(item, dict):
            path = item.get("path")
            if not isinstance(path, str) or not path:
                raise MalformedError("artifact needs a path")
            out.append({"path": path, "lines": str(item.get("lines") or "")})
        elif isinstance(item, str) and item:
            path, sep, lines = item.rpartition(":")
            if sep and _looks_like_range(lines):
                out.append({"path": path, "lines": lines})
            else:
                out.append({"path": item, "lines": ""})
        else:
            raise MalformedError(f"bad artifact reference: {item!r}")
    return out


def _looks_like_range(text: str) -> bool:
    head, _, tail = text.partition("-")
    return head.isdigit() and (tail.isdigit() or tail == "")


def audit_gate_soundness(session: Session) -> list[str]:
    """Every completed step must have verified evidence for each strict or
    testable binding; returns one line per violation found."""
    rules = session.workspace.load_rules()
    violations = []
    for step in session.walk():
        if step.status != "complete":
            continue
        for rule_id, title in unverified_rules(step, rules, session._verified_ids(step.id)):
            violations.append(
                f"{step.id} is complete but {rule_id} ({title}) lacks verified evidence"
            )
    return violations
