"""Command-line gateway.

Every command prints one JSON document to stdout, optionally followed by
plain-text lines (tables), and always ends with the protocol reminder
line so an agent reading the output is re-anchored on its obligations.
Errors go to stderr; the blocked-completion message is emitted byte for
byte as the engine formats it.

Exit codes: 0 ok; 2 protocol/gate violation; 3 unknown id; 4 lock
timeout; 5 malformed input (including unknown commands and bad flags).
"""

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from .enforcement import (
    PROTOCOL_REMINDER,
    EngineError,
    GateError,
    MalformedError,
    ProofFailed,
)
from .evolution import attach_note, decide_candidate, decide_proposal, generate_proposals
from .harness import (
    CONDITIONS,
    ScriptedAgent,
    format_comparison,
    run_trials,
    summarize_reports,
)
from .rules import RuleStoreError, import_rules_file
from .session import Session
from .workspace import LockTimeout, Workspace, WorkspaceError, init_workspace

USAGE_EXIT = 5


class _UsageError(Exception):
    """Raised instead of argparse's SystemExit so main can exit 5."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.format_usage()}error: {message}")


def _read_text(path: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise MalformedError(f"cannot read {path}: {exc}") from exc


def _workspace(args) -> Workspace:
    return Workspace(args.root)


def _open_session(args, ws: Workspace) -> Session:
    return Session.open(ws, args.session, lock_timeout=args.lock_timeout)


# -- command handlers (each returns (payload, extra stdout lines))


def cmd_init(args):
    user = args.user or os.environ.get("USER") or "user"
    ws = init_workspace(args.root, user, agent_log_path=args.agent_log)
    return (
        {
            "ok": True,
            "root": str(Path(args.root).resolve()),
            "workspace": str(ws.zoro_dir),
            "user": ws.config["user_name"],
        },
        [],
    )


def cmd_structure_rules(args):
    ws = _workspace(args)
    text = _read_text(args.source)
    ruleset = ws.load_rules()
    before = set(ruleset.rules)
    import_rules_file(text, into=ruleset)
    ws.save_rules(ruleset)
    return (
        {
            "ok": True,
            "imported": len(set(ruleset.rules) - before),
            "total": len(ruleset.rules),
            "categories": ruleset.categories,
        },
        [],
    )


def cmd_sessions(args):
    ws = _workspace(args)
    handler = {
        "list": _sessions_list,
        "create": _sessions_create,
        "enrich": _sessions_enrich,
        "note": _sessions_note,
        "advance": _sessions_advance,
        "show": _sessions_show,
    }[args.action]
    return handler(args, ws)


def _require(args, *names):
    for name in names:
        if getattr(args, name.replace("-", "_"), None) is None:
            raise MalformedError(f"sessions {args.action} requires --{name}")


def _sessions_list(args, ws):
    sessions = []
    for sid in sorted(ws.list_sessions()):
        session = Session.open(ws, sid, lock_timeout=args.lock_timeout)
        sessions.append(
            {
                "id": sid,
                "state": session.doc["state"],
                "created_at": session.doc["created_at"],
                "last_seq": session.doc["last_seq"],
                "steps": len(list(session.walk())) if session.plan else None,
            }
        )
    return {"sessions": sessions}, []


def _sessions_create(args, ws):
    if args.from_log and args.plan_file:
        raise MalformedError("pass either --from-log or --plan-file, not both")
    session = Session.create(
        ws, enforce_gate=not args.no_gate, lock_timeout=args.lock_timeout
    )
    plan = None
    if args.from_log:
        plan = session.ingest_log(_read_text(args.from_log), source="agent-log")
    elif args.plan_file:
        plan = session.ingest_log(_read_text(args.plan_file), source="plan-file")
    return (
        {"session": dict(session.doc), "plan": plan.to_dict() if plan else None},
        [],
    )


def _sessions_enrich(args, ws):
    _require(args, "session")
    session = _open_session(args, ws)
    plan = session.enrich()
    return {"session": session.sid, "plan": plan.to_dict()}, []


def _sessions_note(args, ws):
    _require(args, "session", "evidence", "text")
    session = _open_session(args, ws)
    author = args.author or ws.config.get("user_name", "user")
    note = attach_note(session, args.evidence, args.text, author)
    return {"session": session.sid, "note": note}, []


def _sessions_advance(args, ws):
    _require(args, "session", "to")
    session = _open_session(args, ws)
    doc = session.advance_state(args.to)
    return {"session": doc}, []


def _sessions_show(args, ws):
    _require(args, "session")
    session = _open_session(args, ws)
    return (
        {
            "session": dict(session.doc),
            "plan": session.plan.to_dict() if session.plan else None,
            "supervision": session.supervision(),
        },
        [],
    )


def cmd_update_step(args):
    session = _open_session(args, _workspace(args))
    return session.update_step(args.step, args.status), []


def cmd_prove_rule(args):
    session = _open_session(args, _workspace(args))
    record = session.prove_rule(
        args.step,
        args.rule,
        summary=args.summary,
        artifacts=args.artifact or None,
        test_command=args.test_cmd,
        test_timeout=args.timeout,
    )
    return {"ok": True, "record": record}, []


def cmd_evolve(args):
    session = _open_session(args, _workspace(args))
    if args.decide and args.decide_candidate:
        raise MalformedError("pass either --decide or --decide-candidate, not both")
    if args.decide:
        if not args.action:
            raise MalformedError("--decide requires --action")
        rule = decide_proposal(session, args.decide, args.action, text=args.text)
        return (
            {
                "ok": True,
                "proposal": args.decide,
                "action": args.action,
                "rule": rule.to_dict() if rule else None,
            },
            [],
        )
    if args.decide_candidate:
        if not args.action:
            raise MalformedError("--decide-candidate requires --action")
        if args.action == "edit":
            raise MalformedError("candidates accept only accept or reject")
        rule = decide_candidate(session, args.decide_candidate, args.action)
        return (
            {
                "ok": True,
                "candidate": args.decide_candidate,
                "action": args.action,
                "rule": rule.to_dict() if rule else None,
            },
            [],
        )
    proposals = generate_proposals(session)
    return {"proposals": proposals, "candidates": session.candidates}, []


def cmd_simulate(args):
    ws = _workspace(args)
    plan_path = args.plan_file or ws.config.get("agent_log_path")
    if not plan_path:
        raise MalformedError(
            "no plan source: pass --plan-file or configure agent_log_path"
        )
    plan_text = _read_text(plan_path)
    agent = ScriptedAgent.from_file(args.agent)
    if args.seed is not None:
        agent = replace(agent, rng_seed=args.seed)
    ruleset = ws.load_rules()
    reports = run_trials(plan_text, ruleset, agent, args.condition, args.trials)
    stats = summarize_reports(reports)
    payload = {
        "condition": args.condition,
        "n_trials": args.trials,
        "agent": agent.to_dict(),
        "stats": stats,
        "trials": [
            {k: v for k, v in r.to_dict().items() if k != "trace"} for r in reports
        ],
    }
    table = format_comparison({"conditions": {args.condition: stats}})
    return payload, table.splitlines()


def cmd_api(args):
    from .api import serve

    url = f"http://127.0.0.1:{args.port}"
    _emit({"ok": True, "serving": url, "root": str(Path(args.root).resolve())}, [])
    sys.stdout.flush()
    serve(args.root, args.port)
    return None, None  # serve only returns once the server is shut down


def build_parser() -> _Parser:
    parser = _Parser(prog="zoro", description="rule protocol workspace commands")
    common = _Parser(add_help=False)
    common.add_argument("--root", default=".", help="repository root (default: cwd)")
    common.add_argument(
        "--lock-timeout",
        type=float,
        default=10.0,
        help="seconds to wait for the session lock",
    )
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("init", parents=[common], help="create the workspace")
    p.add_argument("--user", help="user name recorded in the workspace config")
    p.add_argument("--agent-log", help="agent log path to watch for plans")
    p.set_defaults(handler=cmd_init)

    p = sub.add_parser(
        "structure-rules", parents=[common], help="import a markdown rules file"
    )
    p.add_argument("--from", dest="source", required=True, help="markdown file to import")
    p.set_defaults(handler=cmd_structure_rules)

    p = sub.add_parser("sessions", parents=[common], help="manage sessions")
    p.add_argument(
        "action",
        nargs="?",
        default="list",
        choices=["list", "create", "enrich", "note", "advance", "show"],
    )
    p.add_argument("--session", help="session id")
    p.add_argument("--from-log", help="agent log file to ingest on create")
    p.add_argument("--plan-file", help="plan file to ingest on create")
    p.add_argument("--no-gate", action="store_true", help="disable the completion gate")
    p.add_argument("--evidence", help="evidence id a note attaches to")
    p.add_argument("--text", help="note text")
    p.add_argument("--author", help="note author (default: configured user)")
    p.add_argument("--to", help="target lifecycle state for advance")
    p.set_defaults(handler=cmd_sessions)

    p = sub.add_parser("update-step", parents=[common], help="mark step progress")
    p.add_argument("--session", required=True)
    p.add_argument("--step", required=True)
    p.add_argument("--status", required=True, choices=["in-progress", "complete"])
    p.set_defaults(handler=cmd_update_step)

    p = sub.add_parser("prove-rule", parents=[common], help="submit rule evidence")
    p.add_argument("--session", required=True)
    p.add_argument("--step", required=True)
    p.add_argument("--rule", required=True)
    p.add_argument("--summary", required=True)
    p.add_argument(
        "--artifact",
        action="append",
        help="artifact path, optionally with a line range (path:12-40); repeatable",
    )
    p.add_argument("--test-cmd", help="shell command whose exit code verifies the rule")
    p.add_argument("--timeout", type=float, default=120.0, help="test timeout seconds")
    p.set_defaults(handler=cmd_prove_rule)

    p = sub.add_parser(
        "evolve", parents=[common], help="generate or decide refinement proposals"
    )
    p.add_argument("--session", required=True)
    p.add_argument("--decide", help="proposal id to decide")
    p.add_argument("--decide-candidate", help="learned-rule candidate id to decide")
    p.add_argument("--action", choices=["accept", "reject", "edit"])
    p.add_argument("--text", help="replacement text for --action edit")
    p.set_defaults(handler=cmd_evolve)

    p = sub.add_parser("simulate", parents=[common], help="run scripted-agent trials")
    p.add_argument("--condition", required=True, choices=list(CONDITIONS))
    p.add_argument("--seed", type=int, help="override the agent file's rng seed")
    p.add_argument("--trials", type=int, required=True)
    p.add_argument("--agent", required=True, help="JSON file of agent parameters")
    p.add_argument("--plan-file", help="plan log to simulate against")
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("api", parents=[common], help="serve the local HTTP service")
    p.add_argument("--port", type=int, default=7337)
    p.set_defaults(handler=cmd_api)

    return parser


def _emit(payload, extra):
    sys.stdout.write(json.dumps(payload, indent=2, ensure_ascii=False) + "\n")
    for line in extra:
        sys.stdout.write(line + "\n")
    sys.stdout.write(PROTOCOL_REMINDER + "\n")


def _fail(exc, exit_code, *, raw_stderr=False, record=None):
    payload = {"ok": False, "error": str(exc), "exit_code": exit_code}
    if record is not None:
        payload["record"] = record
    _emit(payload, [])
    text = str(exc) if raw_stderr else f"Error: {exc}"
    sys.stderr.write(text + "\n")
    return exit_code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        sys.stderr.write(str(exc) + "\n")
        return USAGE_EXIT
    try:
        payload, extra = args.handler(args)
    except GateError as exc:
        # the refusal text on stderr is the engine's, byte for byte
        return _fail(exc, 2, raw_stderr=True)
    except ProofFailed as exc:
        return _fail(exc, 2, record=exc.record)
    except LockTimeout as exc:
        return _fail(exc, 4)
    except EngineError as exc:
        return _fail(exc, exc.exit_code)
    except (WorkspaceError, RuleStoreError) as exc:
        return _fail(exc, USAGE_EXIT)
    except KeyboardInterrupt:
        return 0
    if payload is not None:
        _emit(payload, extra)
    return 0


if __name__ == "__main__":
    sys.exit(main())
