"""Shared workspace under `.zoro/`: the coordination layer every process
(CLI invocations, the HTTP service, watchers) goes through.

Layout:

    .zoro/
      config.json
      rules.json
      journal.log            append-only write notifications for watchers
      sessions/<sid>/
        plan.json
        state.json
        notes.json
        proposals.json
        evidence/<eid>.json
        events.log           append-only session event source

All JSON documents are schema-validated before write and written atomically
(temp file, fsync, rename), so a reader never observes a torn document. Every
committed write appends one entry to journal.log; watchers tail the journal,
which makes the notification stream exactly-once and ordered by construction.
Log appends go through a heal step so a line torn by a crash can never corrupt
the next entry.
"""

from __future__ import annotations

import fcntl
import json
import os
import re
import shutil
import tempfile
import time
from pathlib import Path
from typing import Iterator

from .rules import RuleSet
from .util import content_hash, now_iso

SCHEMA_VERSION = 1

ZORO_DIR = ".zoro"
PROTOCOL_FILE = "ZORO.md"
MARKER_BEGIN = "<!-- zoro:protocol:begin -->"
MARKER_END = "<!-- zoro:protocol:end -->"
DEFAULT_RULES_FILE = "AGENTS.md"

SESSION_STATES = ("planning", "executing", "reviewing", "closed")

PROTOCOL_TEXT = """\
# ZORO protocol

This repository runs under active rule supervision. The working agreement is
small; follow it exactly.

1. Work from the ingested plan. Before touching a step, mark it:
   `zoro update-step --session <sid> --step <step-id> --status in-progress`
2. While the step is in progress, prove every strict rule bound to it:
   `zoro prove-rule --session <sid> --step <step-id> --rule <rule-id> \\
       --summary "what was done" --artifact path:start-end`
   Rules marked testable also need `--test-cmd "<command>"`; the engine runs
   the command itself and only a passing run counts.
3. Only then mark the step complete:
   `zoro update-step --session <sid> --step <step-id> --status complete`
   Completion is refused while any strict or testable rule on the step lacks
   verified evidence. Top-level steps go in order; child steps may finish in
   any order inside their parent.
4. Humans review evidence and leave notes on it. `zoro evolve` turns those
   notes into rule refinements; summaries that begin with `user_decision:`
   become candidate rules.

Every command's output ends with a reminder of the next obligation. If a
completion is blocked, the error names exactly the rules still unproven.
"""

# Block prepended to the repo rules file so agents that only read that file
# still see the protocol. Replaced in place on re-init, never duplicated.
RULES_FILE_BLOCK = (
    MARKER_BEGIN
    + "\n"
    + """\
This repository uses the zoro protocol. Read ZORO.md at the repo root before
acting. Mark steps with `zoro update-step`, prove strict rules with
`zoro prove-rule`; step completion is blocked until proofs verify.
"""
    + MARKER_END
    + "\n"
)


class WorkspaceError(Exception):
    pass


class SchemaError(WorkspaceError):
    pass


class LockTimeout(WorkspaceError):
    pass


# --- document schemas -------------------------------------------------------

_NULLABLE_STR = (str, type(None))

SCHEMAS: dict[str, dict[str, object]] = {
    "config": {
        "schema_version": int,
        "user_name": str,
        "agent_log_path": _NULLABLE_STR,
        "stall_window_seconds": int,
        "allow_out_of_order": bool,
        "rules_file": str,
    },
    "rules": {"schema_version": int, "rules": dict},
    "plan": {
        "schema_version": int,
        "id": str,
        "source": str,
        "enriched": bool,
        "created_at": str,
        "ruleset_hash": _NULLABLE_STR,
        "steps": list,
    },
    "session": {
        "schema_version": int,
        "id": str,
        "state": str,
        "ruleset_hash": str,
        "created_at": str,
        "enforce_gate": bool,
        "ingested_plan_hashes": list,
        "gate_error_counts": dict,
        "last_event_at": _NULLABLE_STR,
        "last_seq": int,
    },
    "notes": {"schema_version": int, "notes": list},
    "proposals": {"schema_version": int, "proposals": list, "candidates": list},
    "evidence": {
        "schema_version": int,
        "id": str,
        "session_id": str,
        "step_id": str,
        "rule_id": str,
        "level": str,
        "summary": str,
        "artifacts": list,
        "verified": bool,
        "advisory": bool,
        "submitted_at": str,
        "test": (dict, type(None)),
        "warnings": list,
        "event_seq": int,
    },
}

_PATH_KINDS = [
    (re.compile(r"^config\.json$"), "config"),
    (re.compile(r"^rules\.json$"), "rules"),
    (re.compile(r"^sessions/[^/]+/plan\.json$"), "plan"),
    (re.compile(r"^sessions/[^/]+/state\.json$"), "session"),
    (re.compile(r"^sessions/[^/]+/notes\.json$"), "notes"),
    (re.compile(r"^sessions/[^/]+/proposals\.json$"), "proposals"),
    (re.compile(r"^sessions/[^/]+/evidence/[^/]+\.json$"), "evidence"),
]


def kind_for_path(relpath: str) -> str:
    for pattern, kind in _PATH_KINDS:
        if pattern.match(relpath):
            return kind
    raise SchemaError(f"unmanaged workspace path: {relpath}")


def validate_document(kind: str, document: dict) -> None:
    schema = SCHEMAS.get(kind)
    if schema is None:
        raise SchemaError(f"unknown document kind: {kind}")
    if not isinstance(document, dict):
        raise SchemaError(f"{kind} document must be an object")
    problems = []
    for field, expected in schema.items():
        if field not in document:
            problems.append(f"missing field {field!r}")
            continue
        if not isinstance(document[field], expected):  # type: ignore[arg-type]
            problems.append(f"field {field!r} has wrong type")
    if kind == "session" and document.get("state") not in SESSION_STATES:
        problems.append(f"bad session state {document.get('state')!r}")
    if problems:
        raise SchemaError(f"invalid {kind} document: " + "; ".join(problems))


# --- low-level file primitives ----------------------------------------------


def atomic_write_json(path: Path, document: dict) -> str:
    """Write JSON durably: temp file in the same directory, fsync, rename.
    Returns the content hash of the serialized document."""
    serialized = json.dumps(document, indent=2, ensure_ascii=False) + "\n"
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(serialized)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp_name, path)
    except BaseException:
        try:
            os.unlink(tmp_name)
        except OSError:
            pass
        raise
    dir_fd = os.open(path.parent, os.O_RDONLY)
    try:
        os.fsync(dir_fd)
    finally:
        os.close(dir_fd)
    return content_hash(serialized)


def atomic_write_text(path: Path, text: str) -> None:
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp_name, path)
    except BaseException:
        try:
            os.unlink(tmp_name)
        except OSError:
            pass
        raise


def append_log_line(path: Path, record: dict) -> None:
    """Append one JSON line durably. If a previous append was torn by a crash
    (no trailing newline), a newline is inserted first so the torn fragment is
    isolated on its own, unparseable line."""
    payload = json.dumps(record, ensure_ascii=False)
    heal = b""
    if path.exists() and path.stat().st_size > 0:
        with open(path, "rb") as fh:
            fh.seek(-1, os.SEEK_END)
            if fh.read(1) != b"\n":
                heal = b"\n"
    with open(path, "ab") as fh:
        fh.write(heal + payload.encode("utf-8") + b"\n")
        fh.flush()
        os.fsync(fh.fileno())


def read_log(path: Path, since: int = 0) -> list[dict]:
    """Read committed log entries with seq > since; unparseable lines (torn
    writes) are skipped."""
    if not path.exists():
        return []
    entries = []
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError:
                continue
            if isinstance(record, dict) and record.get("seq", 0) > since:
                entries.append(record)
    return entries


def last_log_seq(path: Path) -> int:
    if not path.exists():
        return 0
    # the tail is enough; a torn final line parses as nothing and we fall
    # back one line at a time
    size = path.stat().st_size
    with open(path, "rb") as fh:
        fh.seek(max(0, size - 65536))
        chunk = fh.read().decode("utf-8", errors="replace")
    for line in reversed(chunk.split("\n")):
        line = line.strip()
        if not line:
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError:
            continue
        if isinstance(record, dict) and "seq" in record:
            return int(record["seq"])
    return 0


class FileLock:
    """Advisory on-disk lock via flock. The kernel drops the lock when the
    holding process dies, so a stale holder never wedges the workspace."""

    def __init__(self, path: Path, timeout: float = 10.0, poll: float = 0.05):
        self.path = path
        self.timeout = timeout
        self.poll = poll
        self._fh = None

    def __enter__(self) -> "FileLock":
        self.path.parent.mkdir(parents=True, exist_ok=True)
        deadline = time.monotonic() + self.timeout
        fh = open(self.path, "a+")
        while True:
            try:
                fcntl.flock(fh.fileno(), fcntl.LOCK_EX | fcntl.LOCK_NB)
                break
            except BlockingIOError:
                if time.monotonic() >= deadline:
                    fh.close()
                    raise LockTimeout(f"could not acquire lock {self.path.name} "
                                      f"within {self.timeout}s")
                time.sleep(self.poll)
        fh.truncate(0)
        fh.write(f"{os.getpid()} {now_iso()}\n")
        fh.flush()
        self._fh = fh
        return self

    def __exit__(self, *exc) -> None:
        if self._fh is not None:
            fcntl.flock(self._fh.fileno(), fcntl.LOCK_UN)
            self._fh.close()
            self._fh = None


# --- workspace --------------------------------------------------------------


def default_config(user_name: str, rules_file: str = DEFAULT_RULES_FILE,
                   agent_log_path: str | None = None) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "user_name": user_name,
        "agent_log_path": agent_log_path,
        "stall_window_seconds": 600,
        "allow_out_of_order": False,
        "rules_file": rules_file,
    }


class Workspace:
    def __init__(self, root: Path | str):
        self.root = Path(root)
        self.zoro_dir = self.root / ZORO_DIR
        if not self.zoro_dir.is_dir():
            raise WorkspaceError(f"no {ZORO_DIR} workspace under {self.root}")
        self.config = json.loads((self.zoro_dir / "config.json").read_text("utf-8"))

    # -- paths

    def path(self, relpath: str) -> Path:
        return self.zoro_dir / relpath

    def session_dir(self, sid: str) -> Path:
        return self.zoro_dir / "sessions" / sid

    def list_sessions(self) -> list[str]:
        sessions = self.zoro_dir / "sessions"
        return sorted(p.name for p in sessions.iterdir() if p.is_dir())

    # -- state io

    def write_state(self, relpath: str, document: dict) -> int:
        """Schema-validate, write atomically, and journal the commit.
        Returns the journal sequence number of the write."""
        kind = kind_for_path(relpath)
        validate_document(kind, document)
        digest = atomic_write_json(self.path(relpath), document)
        return self._journal_commit(relpath, digest)

    def read_state(self, relpath: str) -> dict | None:
        target = self.path(relpath)
        if not target.exists():
            return None
        return json.loads(target.read_text("utf-8"))

    def load_rules(self) -> RuleSet:
        raw = self.read_state("rules.json")
        if raw is None:
            return RuleSet()
        return RuleSet.from_dict(raw)

    def save_rules(self, ruleset: RuleSet) -> None:
        with self.lock("rules"):
            self.write_state("rules.json", ruleset.to_dict())

    # -- locks

    def lock(self, name: str, timeout: float = 10.0) -> FileLock:
        return FileLock(self.zoro_dir / f".{name}.lock", timeout=timeout)

    def session_lock(self, sid: str, timeout: float = 10.0) -> FileLock:
        return FileLock(self.session_dir(sid) / ".lock", timeout=timeout)

    # -- journal / watcher

    @property
    def journal_path(self) -> Path:
        return self.zoro_dir / "journal.log"

    def _journal_commit(self, relpath: str, digest: str) -> int:
        with self.lock("journal", timeout=30.0):
            seq = last_log_seq(self.journal_path) + 1
            append_log_line(
                self.journal_path,
                {"seq": seq, "path": relpath, "content_hash": digest, "ts": now_iso()},
            )
        return seq

    def journal_entries(self, since: int = 0) -> list[dict]:
        return read_log(self.journal_path, since=since)

    def watch(
        self,
        since: int = 0,
        poll_interval: float = 0.25,
        stop=None,
        idle_timeout: float | None = None,
    ) -> Iterator[dict]:
        """Yield journal entries in commit order, polling the journal file.

        Ends when `stop` (a threading.Event) is set or nothing new arrives for
        `idle_timeout` seconds. A read failure yields one diagnostic entry and
        ends the stream instead of hanging."""
        last = since
        idle_since = time.monotonic()
        while True:
            if stop is not None and stop.is_set():
                return
            try:
                fresh = self.journal_entries(since=last)
            except OSError as exc:
                yield {"seq": last, "diagnostic": f"watch failed: {exc}"}
                return
            for entry in fresh:
                last = max(last, entry["seq"])
                idle_since = time.monotonic()
                yield entry
            if idle_timeout is not None and time.monotonic() - idle_since > idle_timeout:
                return
            time.sleep(poll_interval)


def _render_rules_file(existing: str) -> str:
    """Prepend or refresh the protocol block in the repo rules file."""
    if MARKER_BEGIN in existing and MARKER_END in existing:
        pattern = re.compile(
            re.escape(MARKER_BEGIN) + r".*?" + re.escape(MARKER_END) + r"\n?",
            re.DOTALL,
        )
        return pattern.sub(RULES_FILE_BLOCK, existing, count=1)
    if not existing:
        return RULES_FILE_BLOCK
    return RULES_FILE_BLOCK + "\n" + existing


def init_workspace(
    root: Path | str,
    user_name: str,
    rules_file: str = DEFAULT_RULES_FILE,
    agent_log_path: str | None = None,
) -> Workspace:
    """Create (or adopt) the `.zoro/` workspace at the repo root.

    A fresh workspace is staged in a temporary directory and renamed into
    place last, so a failing init leaves nothing behind. Re-running init is
    idempotent: existing config and rules are kept, and the protocol files are
    only rewritten when their bytes would change."""
    root = Path(root)
    if not root.is_dir():
        raise WorkspaceError(f"root is not a directory: {root}")
    zoro_dir = root / ZORO_DIR
    if not zoro_dir.is_dir():
        staging = None
        try:
            staging = Path(
                tempfile.mkdtemp(dir=root, prefix=ZORO_DIR + ".staging-")
            )
            config = default_config(
                user_name, rules_file=rules_file, agent_log_path=agent_log_path
            )
            atomic_write_json(staging / "config.json", config)
            atomic_write_json(
                staging / "rules.json",
                {"schema_version": SCHEMA_VERSION, "rules": {}},
            )
            (staging / "sessions").mkdir()
            os.replace(staging, zoro_dir)
        except BaseException as exc:
            if staging is not None:
                shutil.rmtree(staging, ignore_errors=True)
            if isinstance(exc, WorkspaceError):
                raise
            raise WorkspaceError(f"init failed, nothing created: {exc}") from exc

    workspace = Workspace(root)

    protocol_path = root / PROTOCOL_FILE
    if not protocol_path.exists() or protocol_path.read_text("utf-8") != PROTOCOL_TEXT:
        atomic_write_text(protocol_path, PROTOCOL_TEXT)

    rules_path = root / workspace.config.get("rules_file", rules_file)
    existing = rules_path.read_text("utf-8") if rules_path.exists() else ""
    rendered = _render_rules_file(existing)
    if rendered != existing:
        atomic_write_text(rules_path, rendered)

    return workspace
