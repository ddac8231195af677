from __future__ import annotations

import pytest

from harness import audit, evidence, gates, memory, orchestrator
from harness.store import tree_digest


def test_lower_median():
    assert audit.lower_median([0, 0, 0, 1, 1, 1, 1, 3]) == 1
    assert audit.lower_median([0, 1]) == 0
    assert audit.lower_median([]) is None


@pytest.mark.parametrize("delta,movement", [
    (None, "no-prior"), (0.25, "flat"), (-0.25, "flat"), (0.0, "flat"), (0.26, "up"), (-0.5, "down"),
    (0.1 + 0.15, "flat"),
])
def test_classify_movement(delta, movement):
    assert audit.classify_movement(delta) == movement


def test_task_category():
    assert audit.task_category({"kind": "experiment", "question": "x"}) == "experiment/control"
    assert audit.task_category({"kind": "note", "question": "Collect reviewer notes"}) == "other"


def test_finding_to_citing_edge_is_one_conversion(ws):
    orchestrator.advance_stage(ws, "planning")
    orchestrator.advance_stage(ws, "experiment")
    a = ws.write_artifact("iterations/0000/a.json", {"v": 1}, "run-log", "experimenter", meta={"condition": "x"})
    b = ws.write_artifact("iterations/0000/b.json", {"v": 1}, "run-log", "experimenter", meta={"condition": "y"})
    evidence.register_claim(ws, "c", "s")
    d = gates.log_decision(ws, gates.GateDecision("validation", "block", gates.detect_duplicates(ws, [a.id, b.id]),
                                                  iteration=0))
    evidence.attach_edges(ws, "c", [(b.id, "contradicts")], cause_refs=[d.findings[0].id])
    rep = audit.extract_conversions(ws)
    (c,) = rep.events
    assert c.signal_ref == (d.findings[0].id, 0) and c.latency == 0
    assert set(c.harness_functions) == {"H2", "H3"} and c.kind == "behavior"
    assert rep.broken == []


def test_signal_without_update_is_not_a_conversion(ws):
    a = ws.write_artifact("iterations/0000/a.json", {"v": 1}, "run-log", "experimenter", meta={"condition": "x"})
    b = ws.write_artifact("iterations/0000/b.json", {"v": 1}, "run-log", "experimenter", meta={"condition": "y"})
    gates.log_decision(ws, gates.GateDecision("validation", "block", gates.detect_duplicates(ws, [a.id, b.id])))
    assert audit.extract_conversions(ws).events == []


def test_overlay_hop_and_latency(ws):
    for stage in ("planning", "experiment", "validation", "review", "reflection"):
        orchestrator.advance_stage(ws, stage)
    art = ws.write_artifact("iterations/0000/reflection/r.json", {"issues": [
        {"category": "planning", "failure_class": "x"}]}, "reflection", "supervisor")
    (issue,) = memory.normalize(ws, art.id)
    ws.write_artifact("iterations/0000/review/review.json", {"score": 6}, "review", "critic")
    for stage in ("writing", "quality-gate", "planning"):
        orchestrator.advance_stage(ws, stage)
    orchestrator.mutate_plan(ws, [{"op": "add", "task": {"id": "t", "question": "q"}}],
                             [memory.overlay_id("planner", issue.id)])
    (c,) = audit.extract_conversions(ws).events
    assert c.latency == 1 and set(c.harness_functions) == {"H1", "H4"}
    assert c.trace_path[0] == issue.id and c.trace_path[1].startswith("ovl-")


def test_auditing_is_read_only(built):
    from harness.store import Workspace

    root = built / "conversion-events"
    before = tree_digest(root)
    ws = Workspace.open(root, readonly=True)
    audit.extract_conversions(ws)
    audit.transition_matrix(ws)
    audit.review_to_action([ws])
    audit.failure_registry(ws)
    assert tree_digest(root) == before


def test_format_helpers(built):
    from harness.store import Workspace

    ws = Workspace.open(built / "conversion-events", readonly=True)
    rep = audit.extract_conversions(ws)
    text = audit.format_conversions(rep)
    assert "median_latency=1" in text and text.count("\n") == 9
    assert "harness" in audit.format_matrix(audit.transition_matrix(ws))
