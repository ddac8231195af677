"""File-backed workspace: directory layout, content-addressed artifact
records, structured record files and the append-only event log.

Everything the harness knows lives under one root directory::

    <root>/
      workspace.json        manifest (schema version, hash algorithm)
      workspace.lock        advisory single-writer lock marker
      events.log            one JSON event per line, append-only
      iterations/NNNN/      per-iteration artifacts (plans, results, drafts)
      registry/             artifact/claim/finding/... record files, config
      memory/               issues, overlays, per-project global mirror

Readers never take the lock and only see events up to the last complete
line, so an auditor can run next to a live writer.
"""

from __future__ import annotations

import copy
import fcntl
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Iterator

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
HASH_ALGORITHM = "sha256"

MANIFEST = "workspace.json"
LOCK_MARKER = "workspace.lock"
EVENT_LOG = "events.log"
SKELETON_DIRS = (
    "iterations",
    "registry",
    "registry/artifacts",
    "memory",
    "memory/issues",
    "memory/overlays",
    "memory/global",
)


class ArtifactKind(str, Enum):
    PLAN = "plan"
    CONFIG = "config"
    RUN_LOG = "run-log"
    RESULT_TABLE = "result-table"
    RUN_MANIFEST = "run-manifest"
    REVIEW = "review"
    REFLECTION = "reflection"
    ACTION_PLAN = "action-plan"
    DRAFT = "draft"
    CLAIM_REGISTRY = "claim-registry"
    LESSON = "lesson"
    EVENT_LOG = "event-log"
    REPAIR_TASK = "repair-task"
    OTHER = "other"


class EventKind(str, Enum):
    STAGE_START = "stage-start"
    STAGE_END = "stage-end"
    GATE_DECISION = "gate-decision"
    TASK_UPDATE = "task-update"
    VALIDATOR_FINDING = "validator-finding"
    HARNESS_UPDATE = "harness-update"
    BUDGET_SPEND = "budget-spend"
    ROLLBACK = "rollback"
    # State changes of the claim registry, role bus and memory router also
    # go through the log so that the whole workspace state can be replayed.
    CLAIM_UPDATE = "claim-update"
    OBJECTION = "objection"
    MEMORY_UPDATE = "memory-update"


class WorkspaceError(Exception):
    """Base class for workspace-store failures."""


class WorkspaceExists(WorkspaceError):
    pass


class WorkspaceLocked(WorkspaceError):
    pass


class ReadOnlyWorkspace(WorkspaceError):
    pass


class PathOutsideWorkspace(WorkspaceError):
    pass


class LogIntegrityError(WorkspaceError):
    """The event log contains a line that cannot be trusted.

    ``line_no`` is 1-based; ``events`` holds every event before it.
    """

    def __init__(self, message: str, line_no: int, events: list["EventRecord"]):
        super().__init__(f"events.log line {line_no}: {message}")
        self.line_no = line_no
        self.events = events


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds")


def canonical_json(data: Any) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def dump_pretty(data: Any) -> str:
    return json.dumps(data, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def hash_bytes(data: bytes) -> str:
    return hashlib.new(HASH_ALGORITHM, data).hexdigest()


def hash_file(path: Path) -> str:
    h = hashlib.new(HASH_ALGORITHM)
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def id_number(record_id: str) -> int:
    try:
        return int(record_id.rsplit("-", 1)[1])
    except (IndexError, ValueError):
        return -1


def iteration_dirname(iteration: int) -> str:
    return f"{iteration:04d}"


@dataclass
class EventRecord:
    kind: str
    iteration: int
    stage: str
    refs: list[str] = field(default_factory=list)
    payload: dict[str, Any] = field(default_factory=dict)
    seq: int | None = None
    ts: str | None = None

    @property
    def id(self) -> str:
        return f"evt-{self.seq}"

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "seq": self.seq,
            "iteration": self.iteration,
            "stage": self.stage,
            "kind": self.kind,
            "refs": list(self.refs),
            "payload": self.payload,
            "ts": self.ts,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "EventRecord":
        return cls(
            kind=data["kind"],
            iteration=int(data["iteration"]),
            stage=data["stage"],
            refs=list(data.get("refs", [])),
            payload=dict(data.get("payload", {})),
            seq=int(data["seq"]),
            ts=data.get("ts"),
        )


@dataclass
class ArtifactRecord:
    id: str
    rel_path: str
    content_hash: str
    kind: str
    producer_role: str
    iteration: int
    created_seq: int
    meta: dict[str, Any] = field(default_factory=dict)
    sources: list[str] = field(default_factory=list)
    supersedes: str | None = None
    attempt: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {"schema_version": SCHEMA_VERSION, **asdict(self)}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ArtifactRecord":
        known = {k: data[k] for k in cls.__dataclass_fields__ if k in data}
        return cls(**known)


def parse_log_bytes(raw: bytes, strict: bool = True) -> tuple[list[EventRecord], int | None]:
    """Parse raw log bytes.

    Returns ``(events, torn_line)`` where ``torn_line`` is the 1-based line
    number of an incomplete trailing line (no terminating newline) or None.
    A torn tail raises in strict mode; any bad line before the tail always
    raises.
    """
    events: list[EventRecord] = []
    if not raw:
        return events, None
    lines = raw.split(b"\n")
    tail = lines.pop()  # bytes after the final newline; b"" for a clean log
    for i, line in enumerate(lines, start=1):
        try:
            data = json.loads(line.decode("utf-8"))
            event = EventRecord.from_dict(data)
        except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise LogIntegrityError(f"unparseable record ({exc.__class__.__name__})", i, events) from exc
        expected = events[-1].seq + 1 if events else 0
        if event.seq != expected:
            raise LogIntegrityError(f"sequence gap: expected seq {expected}, found {event.seq}", i, events)
        events.append(event)
    if tail:
        torn = len(lines) + 1
        if strict:
            raise LogIntegrityError("incomplete trailing record", torn, events)
        return events, torn
    return events, None


class Workspace:
    """Handle on one workspace directory.

    Open with :meth:`init` or :meth:`open`. A writable handle holds the
    advisory lock until :meth:`close`.
    """

    def __init__(self, root: Path, *, readonly: bool, fsync: bool = True):
        self.root = Path(root).resolve()
        self.readonly = readonly
        self.fsync = fsync
        self._lock_fd: int | None = None
        self._events: list[EventRecord] = []
        self.torn_tail: int | None = None
        self.manifest = json.loads((self.root / MANIFEST).read_text(encoding="utf-8"))
        if self.manifest.get("hash_algorithm", HASH_ALGORITHM) != HASH_ALGORITHM:
            raise WorkspaceError(f"unsupported hash algorithm {self.manifest['hash_algorithm']!r}")
        if not readonly:
            self._acquire_lock()
        self._load_events()
        self._counters: dict[str, int] = {}
        self._artifacts: dict[str, ArtifactRecord] = {}
        for data in self.list_records("artifacts"):
            rec = ArtifactRecord.from_dict(data)
            self._artifacts[rec.id] = rec

    # -- lifecycle -----------------------------------------------------

    @classmethod
    def init(
        cls,
        root: str | os.PathLike[str],
        *,
        config: dict[str, Any] | None = None,
        global_memory: str | os.PathLike[str] | None = None,
        name: str | None = None,
        fsync: bool = True,
    ) -> "Workspace":
        from harness.config import default_config, default_protected

        root = Path(root)
        if root.exists():
            if not root.is_dir() or any(root.iterdir()):
                raise WorkspaceExists(f"workspace exists: {root} is not empty")
        root.mkdir(parents=True, exist_ok=True)
        for d in SKELETON_DIRS:
            (root / d).mkdir(parents=True, exist_ok=True)
        manifest = {
            "schema_version": SCHEMA_VERSION,
            "hash_algorithm": HASH_ALGORITHM,
            "name": name or root.name,
            "created_at": utc_now(),
            "global_memory": str(Path(global_memory).resolve()) if global_memory else None,
        }
        (root / MANIFEST).write_text(dump_pretty(manifest), encoding="utf-8")
        (root / LOCK_MARKER).touch()
        (root / EVENT_LOG).touch()
        config = config if config is not None else default_config()
        (root / "registry" / "config.json").write_text(dump_pretty(config), encoding="utf-8")
        (root / "registry" / "protected.conf").write_text(dump_pretty(default_protected()), encoding="utf-8")
        ws = cls(root, readonly=False, fsync=fsync)
        ws.log("stage-start", iteration=0, stage="ideation", payload={"config": config})
        return ws

    @classmethod
    def open(cls, root: str | os.PathLike[str], *, readonly: bool = False, fsync: bool = True) -> "Workspace":
        root = Path(root)
        if not (root / MANIFEST).is_file():
            raise WorkspaceError(f"not a workspace: {root}")
        return cls(root, readonly=readonly, fsync=fsync)

    def close(self) -> None:
        if self._lock_fd is not None:
            fcntl.flock(self._lock_fd, fcntl.LOCK_UN)
            os.close(self._lock_fd)
            self._lock_fd = None

    def __enter__(self) -> "Workspace":
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()

    def _acquire_lock(self) -> None:
        fd = os.open(self.root / LOCK_MARKER, os.O_RDWR | os.O_CREAT)
        try:
            fcntl.flock(fd, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            os.close(fd)
            raise WorkspaceLocked(f"another writer holds {self.root / LOCK_MARKER}") from None
        self._lock_fd = fd

    def _require_writer(self) -> None:
        if self.readonly:
            raise ReadOnlyWorkspace(f"workspace {self.root} opened read-only")

    # -- event log -----------------------------------------------------

    @property
    def log_path(self) -> Path:
        return self.root / EVENT_LOG

    def _load_events(self) -> None:
        raw = self.log_path.read_bytes()
        events, torn = parse_log_bytes(raw, strict=False)
        self.torn_tail = torn
        if torn is not None:
            logger.warning("%s: ignoring incomplete trailing record at line %d", self.log_path, torn)
            if not self.readonly:
                # Recovery: cut the torn bytes so the next append starts clean.
                keep = raw.rfind(b"\n") + 1
                with open(self.log_path, "r+b") as f:
                    f.truncate(keep)
        self._events = events

    def read_events(self, strict: bool = True) -> list[EventRecord]:
        """Re-read the log from disk. Strict mode raises on a torn tail."""
        events, torn = parse_log_bytes(self.log_path.read_bytes(), strict=strict)
        return events

    def events(self, kind: str | None = None) -> list[EventRecord]:
        if kind is None:
            return list(self._events)
        return [e for e in self._events if e.kind == kind]

    @property
    def tail_seq(self) -> int:
        return self._events[-1].seq if self._events else -1

    def append_event(self, event: EventRecord) -> int:
        self._require_writer()
        if event.seq is not None:
            raise WorkspaceError("event.seq is assigned by the store")
        event.kind = EventKind(event.kind).value
        event.seq = self.tail_seq + 1
        if event.ts is None:
            event.ts = utc_now()
        line = canonical_json(event.to_dict()) + "\n"
        with open(self.log_path, "ab") as f:
            f.write(line.encode("utf-8"))
            f.flush()
            if self.fsync:
                os.fsync(f.fileno())
        self._events.append(event)
        if event.kind == EventKind.STAGE_START.value:
            self._write_position(event.iteration, event.stage)
        return event.seq

    def log(
        self,
        kind: str,
        *,
        iteration: int | None = None,
        stage: str | None = None,
        refs: Iterable[str] = (),
        payload: dict[str, Any] | None = None,
    ) -> EventRecord:
        if iteration is None or stage is None:
            cur_iter, cur_stage = self.position
            iteration = cur_iter if iteration is None else iteration
            stage = cur_stage if stage is None else stage
        event = EventRecord(kind=kind, iteration=iteration, stage=stage, refs=list(refs), payload=payload or {})
        self.append_event(event)
        return event

    def event(self, event_id: str) -> EventRecord | None:
        if not event_id.startswith("evt-"):
            return None
        try:
            seq = int(event_id[4:])
        except ValueError:
            return None
        if 0 <= seq < len(self._events):
            return self._events[seq]
        return None

    # -- position ------------------------------------------------------

    @property
    def position(self) -> tuple[int, str]:
        for e in reversed(self._events):
            if e.kind == EventKind.STAGE_START.value:
                return e.iteration, e.stage
        return 0, "ideation"

    @property
    def iteration(self) -> int:
        return self.position[0]

    @property
    def stage(self) -> str:
        return self.position[1]

    def _write_position(self, iteration: int, stage: str) -> None:
        state_path = self.root / "registry" / "state.json"
        data = self._read_json_file(state_path) or {}
        attempts = data.get("attempts", {})
        data.update({"schema_version": SCHEMA_VERSION, "iteration": iteration, "stage": stage, "attempts": attempts})
        self._atomic_write(state_path, dump_pretty(data))

    def attempt(self, iteration: int) -> int:
        """Number of rollbacks that re-entered ``iteration``."""
        data = self._read_json_file(self.root / "registry" / "state.json") or {}
        return int(data.get("attempts", {}).get(str(iteration), 0))

    def bump_attempt(self, iteration: int) -> int:
        state_path = self.root / "registry" / "state.json"
        data = self._read_json_file(state_path) or {}
        attempts = data.setdefault("attempts", {})
        attempts[str(iteration)] = attempts.get(str(iteration), 0) + 1
        self._atomic_write(state_path, dump_pretty(data))
        return attempts[str(iteration)]

    # -- paths ---------------------------------------------------------

    def iteration_dir(self, iteration: int | None = None) -> Path:
        it = self.iteration if iteration is None else iteration
        return self.root / "iterations" / iteration_dirname(it)

    def rel(self, path: str | os.PathLike[str]) -> str:
        p = Path(path)
        if not p.is_absolute():
            p = self.root / p
        p = p.resolve()
        try:
            return p.relative_to(self.root).as_posix()
        except ValueError:
            raise PathOutsideWorkspace(f"{path} escapes workspace root {self.root}") from None

    def abspath(self, rel_path: str) -> Path:
        return self.root / rel_path

    @property
    def global_memory_dir(self) -> Path:
        shared = self.manifest.get("global_memory")
        return Path(shared) if shared else self.root / "memory" / "global"

    # -- generic records -----------------------------------------------

    def _collection_dir(self, collection: str) -> Path:
        if collection in ("issues", "overlays"):
            return self.root / "memory" / collection
        return self.root / "registry" / collection

    @staticmethod
    def _read_json_file(path: Path) -> dict[str, Any] | None:
        try:
            return json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            return None

    def _atomic_write(self, path: Path, text: str) -> None:
        self._require_writer()
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(text, encoding="utf-8")
        os.replace(tmp, path)

    def put_record(self, collection: str, record_id: str, data: dict[str, Any]) -> dict[str, Any]:
        """Write a record file, keeping any fields this version does not know."""
        path = self._collection_dir(collection) / f"{record_id}.json"
        existing = self._read_json_file(path) or {}
        merged = {**existing, **copy.deepcopy(data), "schema_version": SCHEMA_VERSION}
        self._atomic_write(path, dump_pretty(merged))
        return merged

    def get_record(self, collection: str, record_id: str) -> dict[str, Any] | None:
        return self._read_json_file(self._collection_dir(collection) / f"{record_id}.json")

    def list_records(self, collection: str) -> list[dict[str, Any]]:
        d = self._collection_dir(collection)
        if not d.is_dir():
            return []
        out = []
        for p in sorted(d.glob("*.json")):
            data = self._read_json_file(p)
            if data is not None:
                out.append(data)
        return out

    def new_id(self, prefix: str, collection: str) -> str:
        if collection not in self._counters:
            d = self._collection_dir(collection)
            self._counters[collection] = len(list(d.glob("*.json"))) if d.is_dir() else 0
        self._counters[collection] += 1
        return f"{prefix}-{self._counters[collection]:04d}"

    def commit(
        self,
        kind: str,
        records: Iterable[tuple[str, str, dict[str, Any]]] = (),
        *,
        refs: Iterable[str] = (),
        payload: dict[str, Any] | None = None,
        config: dict[str, Any] | None = None,
        iteration: int | None = None,
        stage: str | None = None,
    ) -> EventRecord:
        """Write records (and optionally the config) and log one event
        carrying their full post-write contents, so replay can rebuild them."""
        body = dict(payload or {})
        written = []
        for collection, record_id, data in records:
            merged = self.put_record(collection, record_id, data)
            written.append({"collection": collection, "id": record_id, "data": merged})
        if written:
            body["records"] = written
        if config is not None:
            self.save_config(config)
            body["config"] = config
        return self.log(kind, iteration=iteration, stage=stage, refs=refs, payload=body)

    def has_id(self, ref: str) -> bool:
        return self.resolve(ref) is not None

    def resolve(self, ref: str) -> tuple[str, Any] | None:
        """Map an id to ``(collection, record)``; events map to ("events", event)."""
        if ref.startswith("evt-"):
            e = self.event(ref)
            return ("events", e) if e else None
        if ref in self._artifacts:
            return "artifacts", self._artifacts[ref]
        prefix = ref.split("-", 1)[0]
        for collection in ID_COLLECTIONS.get(prefix, ()):
            rec = self.get_record(collection, ref)
            if rec is not None:
                return collection, rec
        for collection in ("claims", "tasks"):
            rec = self.get_record(collection, ref)
            if rec is not None:
                return collection, rec
        return None

    # -- config --------------------------------------------------------

    @property
    def config_path(self) -> Path:
        return self.root / "registry" / "config.json"

    def config(self) -> dict[str, Any]:
        return json.loads(self.config_path.read_text(encoding="utf-8"))

    def save_config(self, config: dict[str, Any]) -> None:
        self._atomic_write(self.config_path, dump_pretty(config))

    # -- artifacts -----------------------------------------------------

    def register_artifact(
        self,
        path: str | os.PathLike[str],
        kind: str,
        producer_role: str = "system",
        iteration: int | None = None,
        *,
        meta: dict[str, Any] | None = None,
        sources: Iterable[str] = (),
    ) -> ArtifactRecord:
        self._require_writer()
        rel_path = self.rel(path)
        kind = ArtifactKind(kind).value
        full = self.abspath(rel_path)
        if not full.is_file():
            raise FileNotFoundError(f"artifact file not found: {rel_path}")
        it = self.iteration if iteration is None else iteration
        if it < 0 or it > self.iteration:
            raise WorkspaceError(f"iteration {it} is ahead of the current iteration {self.iteration}")
        if ".." in Path(rel_path).parts:
            raise PathOutsideWorkspace(rel_path)
        content_hash = hash_file(full)
        current = self.current_artifact(rel_path, it)
        if current is not None and current.content_hash == content_hash:
            return current
        record = ArtifactRecord(
            id=self.new_id("art", "artifacts"),
            rel_path=rel_path,
            content_hash=content_hash,
            kind=kind,
            producer_role=producer_role,
            iteration=it,
            created_seq=self.tail_seq,
            meta=dict(meta or {}),
            sources=list(sources),
            supersedes=current.id if current else None,
            attempt=self.attempt(it),
        )
        self.put_record("artifacts", record.id, record.to_dict())
        self._artifacts[record.id] = record
        return record

    def write_artifact(
        self,
        rel_path: str,
        content: Any,
        kind: str,
        producer_role: str = "system",
        **kwargs: Any,
    ) -> ArtifactRecord:
        """Write ``content`` (JSON-serialisable or str/bytes) and register it."""
        full = self.abspath(self.rel(rel_path))
        full.parent.mkdir(parents=True, exist_ok=True)
        if isinstance(content, bytes):
            full.write_bytes(content)
        elif isinstance(content, str):
            full.write_text(content, encoding="utf-8")
        else:
            full.write_text(dump_pretty(content), encoding="utf-8")
        return self.register_artifact(full, kind, producer_role, **kwargs)

    def artifact(self, artifact_id: str) -> ArtifactRecord | None:
        return self._artifacts.get(artifact_id)

    def artifacts(
        self,
        *,
        iteration: int | None = None,
        kind: str | None = None,
        current_only: bool = True,
    ) -> list[ArtifactRecord]:
        recs: Iterator[ArtifactRecord] = iter(sorted(self._artifacts.values(), key=lambda r: id_number(r.id)))
        superseded = {r.supersedes for r in self._artifacts.values() if r.supersedes}
        out = []
        for r in recs:
            if current_only and r.id in superseded:
                continue
            if iteration is not None and r.iteration != iteration:
                continue
            if kind is not None and r.kind != kind:
                continue
            out.append(r)
        return out

    def current_artifact(self, rel_path: str, iteration: int) -> ArtifactRecord | None:
        matches = [r for r in self._artifacts.values() if r.rel_path == rel_path and r.iteration == iteration]
        if not matches:
            return None
        superseded = {r.supersedes for r in matches if r.supersedes}
        live = [r for r in matches if r.id not in superseded]
        return max(live or matches, key=lambda r: id_number(r.id))

    def live(self, artifact_id: str) -> ArtifactRecord | None:
        """The current record at the same path as ``artifact_id``, following supersession."""
        rec = self.artifact(artifact_id)
        if rec is None:
            return None
        return self.current_artifact(rec.rel_path, rec.iteration) or rec

    def read_artifact(self, record: ArtifactRecord | str) -> bytes:
        if isinstance(record, str):
            rec = self.artifact(record)
            if rec is None:
                raise KeyError(record)
            record = rec
        return self.abspath(record.rel_path).read_bytes()

    def read_artifact_json(self, record: ArtifactRecord | str) -> Any:
        return json.loads(self.read_artifact(record).decode("utf-8"))

    def artifact_intact(self, record: ArtifactRecord) -> bool:
        p = self.abspath(record.rel_path)
        return p.is_file() and hash_file(p) == record.content_hash


    def latest_attempt(self, iteration: int, kind: str) -> list[ArtifactRecord]:
        """Current artifacts of ``kind`` from the newest attempt that produced any."""
        recs = self.artifacts(iteration=iteration, kind=kind)
        if not recs:
            return []
        top = max(r.attempt for r in recs)
        return [r for r in recs if r.attempt == top]

    def latest(self, iteration: int, kind: str) -> ArtifactRecord | None:
        recs = self.artifacts(iteration=iteration, kind=kind)
        return max(recs, key=lambda r: id_number(r.id)) if recs else None


ID_COLLECTIONS = {
    "fnd": ("findings",),
    "gate": ("gates",),
    "obj": ("objections",),
    "iss": ("issues",),
    "ovl": ("overlays",),
    "spd": ("spends",),
    "san": ("sanity-checks",),
    "upd": ("harness-updates",),
}


def init_workspace(root: str | os.PathLike[str], **kwargs: Any) -> Workspace:
    return Workspace.init(root, **kwargs)


def open_workspace(root: str | os.PathLike[str], *, readonly: bool = False) -> Workspace:
    return Workspace.open(root, readonly=readonly)


def tree_digest(root: str | os.PathLike[str]) -> str:
    """Hash of every file path and its bytes under ``root``."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(b"\0")
            h.update(p.read_bytes())
            h.update(b"\0")
    return h.hexdigest()


def strip_timestamps(events: Iterable[EventRecord]) -> list[dict[str, Any]]:
    """Event dicts with wall-clock fields removed, for determinism checks."""
    out = []
    for e in events:
        d = e.to_dict()
        d.pop("ts", None)
        out.append(d)
    return out
