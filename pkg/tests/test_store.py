from __future__ import annotations

import json

import pytest

from harness.store import (
    LogIntegrityError,
    PathOutsideWorkspace,
    ReadOnlyWorkspace,
    Workspace,
    WorkspaceExists,
    WorkspaceLocked,
    parse_log_bytes,
    strip_timestamps,
    tree_digest,
)


def test_init_creates_layout(ws):
    for d in ("iterations", "registry/artifacts", "memory/issues", "memory/overlays"):
        assert (ws.root / d).is_dir()
    assert ws.position == (0, "ideation")
    assert ws.events()[0].kind == "stage-start"
    assert "config" in ws.events()[0].payload


def test_init_refuses_non_empty(tmp_path):
    (tmp_path / "w").mkdir()
    (tmp_path / "w" / "x").write_text("1")
    with pytest.raises(WorkspaceExists):
        Workspace.init(tmp_path / "w")


def test_single_writer_lock(ws):
    with pytest.raises(WorkspaceLocked):
        Workspace.open(ws.root)
    reader = Workspace.open(ws.root, readonly=True)
    assert reader.tail_seq == ws.tail_seq


def test_readonly_rejects_writes(ws):
    ws.close()
    r = Workspace.open(ws.root, readonly=True)
    with pytest.raises(ReadOnlyWorkspace):
        r.log("stage-end")


def test_seq_strictly_increasing_without_gaps(ws):
    for _ in range(5):
        ws.log("stage-end")
    seqs = [e.seq for e in ws.read_events()]
    assert seqs == list(range(len(seqs)))


def test_unknown_event_kind_rejected(ws):
    with pytest.raises(ValueError):
        ws.log("not-a-kind")


def test_hash_stable_on_reregistration(ws):
    a = ws.write_artifact("iterations/0000/x.json", {"v": 1}, "result-table", "experimenter")
    b = ws.register_artifact(ws.root / "iterations/0000/x.json", "result-table", "experimenter")
    assert a.id == b.id and a.content_hash == b.content_hash


def test_changed_file_supersedes(ws):
    a = ws.write_artifact("iterations/0000/x.json", {"v": 1}, "result-table", "experimenter")
    b = ws.write_artifact("iterations/0000/x.json", {"v": 2}, "result-table", "experimenter")
    assert b.supersedes == a.id
    assert [r.id for r in ws.artifacts()] == [b.id]
    assert ws.live(a.id).id == b.id


def test_path_outside_rejected(ws, tmp_path):
    outside = tmp_path / "elsewhere.json"
    outside.write_text("{}")
    with pytest.raises(PathOutsideWorkspace):
        ws.register_artifact(outside, "other")


def test_artifact_ahead_of_iteration_rejected(ws):
    (ws.root / "iterations").mkdir(exist_ok=True)
    (ws.root / "iterations" / "a.json").write_text("{}")
    with pytest.raises(Exception):
        ws.register_artifact(ws.root / "iterations" / "a.json", "other", iteration=3)


def test_torn_tail_ignored_by_reader_and_truncated_by_writer(ws):
    ws.log("stage-end")
    n = len(ws.events())
    ws.close()
    with open(ws.root / "events.log", "ab") as f:
        f.write(b'{"seq": 99, "kind"')
    r = Workspace.open(ws.root, readonly=True)
    assert len(r.events()) == n and r.torn_tail == n + 1
    with pytest.raises(LogIntegrityError):
        r.read_events(strict=True)
    w = Workspace.open(ws.root)
    assert w.read_events(strict=True)[-1].seq == n - 1
    w.log("stage-end")
    assert [e.seq for e in w.read_events()] == list(range(n + 1))
    w.close()


def test_corrupt_middle_line_raises():
    good = json.dumps({"seq": 0, "kind": "stage-start", "iteration": 0, "stage": "ideation"})
    with pytest.raises(LogIntegrityError) as exc:
        parse_log_bytes(f"{good}\nnot json\n{good}\n".encode())
    assert exc.value.line_no == 2 and len(exc.value.events) == 1


def test_sequence_gap_detected():
    a = json.dumps({"seq": 0, "kind": "stage-start", "iteration": 0, "stage": "ideation"})
    b = json.dumps({"seq": 2, "kind": "stage-end", "iteration": 0, "stage": "ideation"})
    with pytest.raises(LogIntegrityError, match="gap"):
        parse_log_bytes(f"{a}\n{b}\n".encode())


def test_commit_logs_full_records(ws):
    ws.commit("claim-update", [("claims", "c1", {"id": "c1", "x": 1})], refs=["c1"], payload={"op": "register"})
    e = ws.events("claim-update")[-1]
    assert e.payload["records"] == [{"collection": "claims", "id": "c1", "data": ws.get_record("claims", "c1")}]


def test_resolve_finds_events_artifacts_and_records(ws):
    art = ws.write_artifact("iterations/0000/x.json", {}, "plan", "planner")
    assert ws.resolve(art.id)[0] == "artifacts"
    assert ws.resolve("evt-0")[0] == "events"
    assert ws.resolve("fnd-9999") is None


def test_tree_digest_sensitive_to_bytes(ws):
    d1 = tree_digest(ws.root)
    ws.log("stage-end")
    assert tree_digest(ws.root) != d1


def test_strip_timestamps(ws):
    assert all("ts" not in d for d in strip_timestamps(ws.events()))
