"""Local HTTP service over the workspace.

The service is a stateless view: every request re-reads the `.zoro`
files through the same session machinery the CLI uses, so anything
visible over HTTP is reconstructible from disk alone. Responses share
one envelope: {"status", "payload", "etag"}. Mutations may send an
If-Match header carrying a previously returned etag; a stale value is
rejected with 409 before anything changes. Plan edits require it.

The event stream is line-delimited JSON: each line is either one
committed event (with its sequence number), a keepalive, or, when the
client resumes from an invalid point, a full-state snapshot followed by
the live tail. Binding is loopback-only; this is a local companion
service, not a network daemon.
"""

import json
import socket
import time
from dataclasses import asdict
from pathlib import Path

import anyio
from fastapi import Body, FastAPI, Request
from fastapi.responses import JSONResponse, RedirectResponse, StreamingResponse
from fastapi.staticfiles import StaticFiles
from starlette.concurrency import run_in_threadpool

from .enforcement import EngineError, MalformedError, UnknownIdError
from .evolution import (
    attach_note,
    decide_candidate,
    decide_proposal,
    generate_proposals,
    update_scores,
)
from .rules import (
    RuleStoreError,
    apply_dedupe_cluster,
    dedupe_rules,
    import_rules_file,
    merge_categories,
)
from .session import Session
from .util import content_hash
from .workspace import LockTimeout, Workspace, WorkspaceError, read_log


class StaleEtag(Exception):
    pass


def _status_for(exc: Exception) -> tuple[int, str]:
    if isinstance(exc, StaleEtag):
        return 409, "conflict"
    if isinstance(exc, UnknownIdError):
        return 404, "error"
    if isinstance(exc, MalformedError):
        return 400, "error"
    if isinstance(exc, LockTimeout):
        return 503, "error"
    if isinstance(exc, EngineError):
        return 409, "conflict"
    return 400, "error"


def _etag(session: Session) -> str:
    return content_hash(json.dumps(session.doc, sort_keys=True))


def _ok(payload, etag=None):
    return {"status": "ok", "payload": payload, "etag": etag}


def _snapshot(session: Session) -> dict:
    records = [rec for recs in session.evidence.values() for rec in recs]
    records.sort(key=lambda r: r["event_seq"])
    return {
        "type": "snapshot",
        "seq": session.doc["last_seq"],
        "session": dict(session.doc),
        "plan": session.plan.to_dict() if session.plan else None,
        "evidence": records,
        "notes": list(session.notes),
        "proposals": list(session.proposals),
        "candidates": list(session.candidates),
    }


def create_app(root: Path | str) -> FastAPI:
    root = Path(root)
    app = FastAPI(docs_url=None, redoc_url=None, openapi_url=None)

    def workspace() -> Workspace:
        return Workspace(root)

    def open_session(sid: str) -> Session:
        return Session.open(workspace(), sid)

    def check_etag(request: Request, current: str, required: bool = False) -> None:
        supplied = request.headers.get("if-match")
        if supplied is None:
            if required:
                raise MalformedError("If-Match header required; fetch the etag first")
            return
        if supplied != current:
            raise StaleEtag(f"stale etag {supplied!r}; current is {current!r}")

    @app.exception_handler(EngineError)
    @app.exception_handler(WorkspaceError)
    @app.exception_handler(RuleStoreError)
    @app.exception_handler(StaleEtag)
    async def engine_error_handler(request: Request, exc: Exception):
        code, status = _status_for(exc)
        return JSONResponse(
            status_code=code,
            content={"status": status, "payload": {"error": str(exc)}, "etag": None},
        )

    # -- sessions

    @app.get("/sessions")
    def list_sessions():
        ws = workspace()
        sessions = []
        for sid in sorted(ws.list_sessions()):
            session = Session.open(ws, sid)
            sessions.append(
                {
                    "id": sid,
                    "state": session.doc["state"],
                    "created_at": session.doc["created_at"],
                    "last_seq": session.doc["last_seq"],
                    "steps": len(list(session.walk())) if session.plan else None,
                }
            )
        return _ok({"sessions": sessions})

    @app.post("/sessions")
    def create_session(body: dict = Body(default_factory=dict)):
        session = Session.create(
            workspace(), enforce_gate=bool(body.get("enforce_gate", True))
        )
        plan = None
        if body.get("log_text"):
            plan = session.ingest_log(body["log_text"], source=body.get("source", "api"))
        return _ok(
            {"session": dict(session.doc), "plan": plan.to_dict() if plan else None},
            _etag(session),
        )

    @app.get("/sessions/{sid}")
    def get_session(sid: str):
        session = open_session(sid)
        return _ok(
            {
                "session": dict(session.doc),
                "plan": session.plan.to_dict() if session.plan else None,
                "supervision": session.supervision(),
            },
            _etag(session),
        )

    @app.get("/sessions/{sid}/supervision")
    def get_supervision(sid: str):
        session = open_session(sid)
        return _ok({"supervision": session.supervision()}, _etag(session))

    # -- plan

    @app.get("/sessions/{sid}/plan")
    def get_plan(sid: str):
        session = open_session(sid)
        if session.plan is None:
            raise UnknownIdError(f"session {sid} has no plan yet")
        return _ok({"plan": session.plan.to_dict()}, _etag(session))

    @app.patch("/sessions/{sid}/plan")
    def patch_plan(sid: str, request: Request, body: dict = Body(...)):
        session = open_session(sid)
        check_etag(request, _etag(session), required=True)
        op = body.get("op")
        if op == "enrich":
            session.enrich()
        elif op == "ingest":
            session.ingest_log(body.get("text", ""), source=body.get("source", "api"))
        else:
            session.edit_plan(body)
        return _ok({"plan": session.plan.to_dict()}, _etag(session))

    # -- rules

    @app.get("/rules")
    def get_rules():
        ruleset = workspace().load_rules()
        return _ok({"rules": ruleset.to_dict()}, ruleset.content_hash())

    @app.post("/rules/import")
    def import_rules(request: Request, body: dict = Body(...)):
        ws = workspace()
        ruleset = ws.load_rules()
        check_etag(request, ruleset.content_hash())
        if not isinstance(body.get("text"), str):
            raise MalformedError("import needs a markdown string under 'text'")
        before = set(ruleset.rules)
        import_rules_file(body["text"], into=ruleset)
        ws.save_rules(ruleset)
        return _ok(
            {"imported": len(set(ruleset.rules) - before), "total": len(ruleset.rules)},
            ruleset.content_hash(),
        )

    @app.post("/rules/merge-categories")
    def merge_rule_categories(request: Request, body: dict = Body(...)):
        ws = workspace()
        ruleset = ws.load_rules()
        check_etag(request, ruleset.content_hash())
        merge_categories(ruleset, list(body.get("from", [])), body.get("into", ""))
        ws.save_rules(ruleset)
        return _ok({"categories": ruleset.categories}, ruleset.content_hash())

    @app.post("/rules/dedupe")
    def dedupe(request: Request, body: dict = Body(default_factory=dict)):
        ws = workspace()
        ruleset = ws.load_rules()
        check_etag(request, ruleset.content_hash())
        threshold = body.get("threshold", 0.6)
        if not isinstance(threshold, (int, float)):
            raise MalformedError("threshold must be a number")
        report = dedupe_rules(ruleset, float(threshold))
        applied = []
        indices = body.get("apply", [])
        if indices:
            for index in indices:
                if not isinstance(index, int) or not 0 <= index < len(report.clusters):
                    raise MalformedError(f"no dedupe cluster at index {index!r}")
                survivor = apply_dedupe_cluster(ruleset, report.clusters[index])
                update_scores(ruleset.rules[survivor], "merged")
                applied.append(survivor)
            ws.save_rules(ruleset)
        return _ok(
            {
                "threshold": report.threshold,
                "clusters": [asdict(c) for c in report.clusters],
                "applied": applied,
            },
            ruleset.content_hash(),
        )

    # -- evidence, notes, evolution

    @app.get("/sessions/{sid}/evidence")
    def list_evidence(sid: str):
        session = open_session(sid)
        records = [rec for recs in session.evidence.values() for rec in recs]
        records.sort(key=lambda r: r["event_seq"])
        return _ok({"evidence": records}, _etag(session))

    @app.post("/sessions/{sid}/notes")
    def post_note(sid: str, request: Request, body: dict = Body(...)):
        session = open_session(sid)
        check_etag(request, _etag(session))
        author = body.get("author") or session.workspace.config.get("user_name", "user")
        note = attach_note(
            session, body.get("evidence_id", ""), body.get("text", ""), author
        )
        return _ok({"note": note}, _etag(session))

    @app.post("/sessions/{sid}/evolve")
    def evolve(sid: str, request: Request, body: dict = Body(default_factory=dict)):
        session = open_session(sid)
        check_etag(request, _etag(session))
        proposals = generate_proposals(session)
        return _ok(
            {"proposals": proposals, "candidates": list(session.candidates)},
            _etag(session),
        )

    @app.get("/sessions/{sid}/proposals")
    def list_proposals(sid: str):
        session = open_session(sid)
        return _ok(
            {
                "proposals": list(session.proposals),
                "candidates": list(session.candidates),
            },
            _etag(session),
        )

    @app.post("/proposals/{pid}/decision")
    def decide(pid: str, body: dict = Body(...)):
        ws = workspace()
        session = _find_proposal_session(ws, pid, body.get("session_id"))
        action = body.get("action", "")
        if pid.startswith("cand-"):
            rule = decide_candidate(session, pid, action)
        else:
            rule = decide_proposal(session, pid, action, text=body.get("text"))
        return _ok(
            {
                "proposal": pid,
                "action": action,
                "rule": rule.to_dict() if rule else None,
            },
            _etag(session),
        )

    # -- event stream

    @app.get("/sessions/{sid}/events")
    async def stream_events(
        sid: str,
        request: Request,
        since: str | None = None,
        poll: float = 0.2,
        keepalive: float = 2.0,
    ):
        session = await run_in_threadpool(open_session, sid)
        events_path = session.workspace.session_dir(sid) / "events.log"
        cursor, prelude = _resume_point(since, session)
        poll = min(max(poll, 0.01), 5.0)
        keepalive = min(max(keepalive, 0.01), 60.0)

        async def gen():
            position = cursor
            emitted_at = time.monotonic()
            if prelude is not None:
                yield json.dumps(prelude, ensure_ascii=False) + "\n"
            while True:
                if await request.is_disconnected():
                    return
                events = await run_in_threadpool(read_log, events_path, position)
                if events:
                    for event in events:
                        yield json.dumps(event, ensure_ascii=False) + "\n"
                    position = events[-1]["seq"]
                    emitted_at = time.monotonic()
                elif time.monotonic() - emitted_at >= keepalive:
                    yield json.dumps({"type": "keepalive", "seq": position}) + "\n"
                    emitted_at = time.monotonic()
                await anyio.sleep(poll)

        return StreamingResponse(gen(), media_type="application/x-ndjson")

    # -- static UI assets

    dist = root / "frontend" / "dist"
    if dist.is_dir():
        app.mount("/ui", StaticFiles(directory=dist, html=True), name="ui")

        @app.get("/")
        def index():
            return RedirectResponse("/ui/")

    else:

        @app.get("/")
        def banner():
            return _ok({"service": "zoro", "ui": None})

    return app


def _resume_point(since: str | None, session: Session):
    """Map a client resume request to (cursor, optional snapshot event)."""
    last = session.doc["last_seq"]
    if since is None:
        return 0, None
    try:
        n = int(since)
    except ValueError:
        n = -1
    if 0 <= n <= last:
        return n, None
    return last, _snapshot(session)


def _find_proposal_session(ws: Workspace, pid: str, hint: str | None) -> Session:
    sids = [hint] if hint else sorted(ws.list_sessions())
    for sid in sids:
        session = Session.open(ws, sid)
        pool = session.candidates if pid.startswith("cand-") else session.proposals
        if any(p["id"] == pid for p in pool):
            return session
    raise UnknownIdError(f"unknown proposal: {pid}")


def bind_loopback(port: int) -> socket.socket:
    """Bind a loopback listening socket, failing loudly when the port is taken."""
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    try:
        sock.bind(("127.0.0.1", port))
        sock.listen(128)
    except OSError as exc:
        sock.close()
        raise WorkspaceError(f"cannot bind 127.0.0.1:{port}: {exc}") from exc
    return sock


def serve(root: Path | str, port: int) -> None:
    """Run the service until interrupted. Raises before serving if the
    workspace is missing or the port is busy."""
    import uvicorn

    app = create_app(root)
    sock = bind_loopback(port)
    config = uvicorn.Config(app, log_level="warning", access_log=False)
    server = uvicorn.Server(config)
    try:
        server.run(sockets=[sock])
    finally:
        sock.close()
