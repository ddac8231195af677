"""Rebuild workspace state from the event log alone.

Every state-changing call logs the full post-write contents of the records it
touched, so folding the log reproduces the registry. Artifact bytes are not
in the log; replay checks their hashes instead.
"""

from __future__ import annotations

import copy
from typing import Any

from harness.store import SCHEMA_VERSION, EventRecord, Workspace, canonical_json, hash_file

SKIP_COLLECTIONS = {"artifacts"}


def _collections(ws: Workspace) -> list[str]:
    reg = ws.root / "registry"
    names = [p.name for p in reg.iterdir() if p.is_dir() and p.name not in SKIP_COLLECTIONS]
    for extra in ("issues", "overlays"):
        if (ws.root / "memory" / extra).is_dir():
            names.append(extra)
    return sorted(set(names))


def snapshot(ws: Workspace) -> dict[str, Any]:
    """Current on-disk state in replay-comparable form."""
    records: dict[str, dict[str, Any]] = {}
    for col in _collections(ws):
        recs = {r["id"]: r for r in ws.list_records(col) if "id" in r}
        if recs:
            records[col] = recs
    attempts = {}
    for it in {e.iteration for e in ws.events()}:
        n = ws.attempt(it)
        if n:
            attempts[str(it)] = n
    return {
        "config": ws.config(),
        "position": list(ws.position),
        "attempts": attempts,
        "records": records,
    }


def fold(events: list[EventRecord]) -> dict[str, Any]:
    config: dict[str, Any] | None = None
    position = [0, "ideation"]
    attempts: dict[str, int] = {}
    records: dict[str, dict[str, Any]] = {}
    for e in events:
        p = e.payload
        if "config" in p:
            config = copy.deepcopy(p["config"])
        for r in p.get("records", []):
            if r["collection"] in SKIP_COLLECTIONS:
                continue
            data = copy.deepcopy(r["data"])
            data.setdefault("schema_version", SCHEMA_VERSION)
            records.setdefault(r["collection"], {})[r["id"]] = data
        if e.kind == "stage-start":
            position = [e.iteration, e.stage]
        if e.kind == "rollback" and "attempt" in p:
            attempts[str(p["target"]["iteration"])] = int(p["attempt"])
    return {"config": config, "position": position, "attempts": attempts, "records": records}


def broken_artifacts(ws: Workspace) -> list[str]:
    out = []
    every = ws.artifacts(current_only=False)
    superseded = {a.supersedes for a in every}
    for rec in every:
        p = ws.abspath(rec.rel_path)
        if rec.id in superseded:
            continue
        if not p.is_file() or hash_file(p) != rec.content_hash:
            out.append(rec.id)
    return out


def replay(ws: Workspace) -> dict[str, Any]:
    return fold(ws.events())


def verify(ws: Workspace) -> tuple[bool, list[str]]:
    """Compare replayed state with disk; returns (ok, differing keys)."""
    a = replay(ws)
    b = snapshot(ws)
    diffs = []
    for key in ("config", "position", "attempts"):
        if canonical_json(a[key]) != canonical_json(b[key]):
            diffs.append(key)
    cols = set(a["records"]) | set(b["records"])
    for col in sorted(cols):
        ra, rb = a["records"].get(col, {}), b["records"].get(col, {})
        for rid in sorted(set(ra) | set(rb)):
            if canonical_json(ra.get(rid)) != canonical_json(rb.get(rid)):
                diffs.append(f"{col}/{rid}")
    diffs += [f"artifacts/{i}" for i in broken_artifacts(ws)]
    return not diffs, diffs
