from __future__ import annotations

import pytest

from harness import audit, gates, orchestrator
from harness.orchestrator import BlockedTransition, PlanError, TransitionError


def _cause(ws):
    return ws.write_artifact("iterations/0000/ideation/brief.json", {"topic": "t"}, "plan", "planner").id


def walk(ws, *stages):
    for s in stages:
        orchestrator.advance_stage(ws, s)


def test_advance_follows_policy(ws):
    walk(ws, "planning", "experiment")
    assert ws.position == (0, "experiment")
    with pytest.raises(TransitionError):
        orchestrator.advance_stage(ws, "writing")


def test_quality_gate_to_planning_starts_next_iteration(ws):
    walk(ws, "planning", "experiment", "validation", "review")
    ws.write_artifact("iterations/0000/review/review.json", {"score": 7}, "review", "critic")
    walk(ws, "reflection", "writing", "quality-gate", "planning")
    assert ws.position == (1, "planning")


def test_missing_review_score_blocks_with_rollback_target(ws):
    walk(ws, "planning", "experiment", "validation", "review", "reflection", "writing")
    with pytest.raises(BlockedTransition) as exc:
        orchestrator.advance_stage(ws, "quality-gate")
    d = exc.value.decision
    assert d.outcome == "block" and tuple(d.rollback_target) == (0, "review")
    ev = orchestrator.rollback(ws, 0, "review", d)
    assert ws.position == (0, "review") and ws.attempt(0) == 1
    assert ev.refs == [d.id] and ev.payload["attempt"] == 1


def test_rollback_needs_block_and_earlier_target(ws):
    walk(ws, "planning")
    with pytest.raises(TransitionError):
        orchestrator.rollback(ws, 0, "ideation", {"outcome": "allow", "id": "gate-0001"})
    with pytest.raises(TransitionError):
        orchestrator.rollback(ws, 0, "writing", {"outcome": "block", "id": "gate-0001"})
    ev = orchestrator.rollback(ws, 0, "planning", {"outcome": "block", "id": "gate-0001"})
    assert ev.payload.get("noop") is True


def test_mutation_requires_resolvable_cause(ws):
    with pytest.raises(PlanError, match="unattributed"):
        orchestrator.mutate_plan(ws, [{"op": "add", "task": {"id": "a", "question": "q"}}], [])
    with pytest.raises(PlanError, match="resolve"):
        orchestrator.mutate_plan(ws, [{"op": "add", "task": {"id": "a", "question": "q"}}], ["art-9999"])


def test_every_task_update_cites_cause(ws):
    c = _cause(ws)
    orchestrator.mutate_plan(ws, [
        {"op": "add", "task": {"id": "a", "question": "q"}},
        {"op": "add", "task": {"id": "b", "question": "q", "dependencies": ["a"]}},
    ], [c])
    orchestrator.mutate_plan(ws, [{"op": "rescale", "task_id": "b", "scale": "full", "budget_units": 3}], [c])
    plan_events = [e for e in ws.events("task-update") if e.payload["op"] != "status"]
    assert plan_events and all(c in e.refs for e in plan_events)
    assert ws.latest(0, "action-plan") is not None


def test_cycle_rejected(ws):
    c = _cause(ws)
    orchestrator.mutate_plan(ws, [{"op": "add", "task": {"id": "a", "question": "q"}}], [c])
    with pytest.raises(PlanError):
        orchestrator.mutate_plan(ws, [{"op": "add", "task": {"id": "b", "question": "q", "dependencies": ["b"]}}],
                                 [c])


def test_remove_with_dependents_rejected(ws):
    c = _cause(ws)
    orchestrator.mutate_plan(ws, [
        {"op": "add", "task": {"id": "a", "question": "q"}},
        {"op": "add", "task": {"id": "b", "question": "q", "dependencies": ["a"]}},
    ], [c])
    with pytest.raises(PlanError, match="required by"):
        orchestrator.mutate_plan(ws, [{"op": "remove", "task_id": "a"}], [c])


def test_reorder_must_respect_dependencies(ws):
    c = _cause(ws)
    orchestrator.mutate_plan(ws, [
        {"op": "add", "task": {"id": "a", "question": "q"}},
        {"op": "add", "task": {"id": "b", "question": "q", "dependencies": ["a"]}},
        {"op": "add", "task": {"id": "x", "question": "q"}},
    ], [c])
    with pytest.raises(PlanError):
        orchestrator.mutate_plan(ws, [{"op": "reorder", "order": ["b", "a", "x"]}], [c])
    orchestrator.mutate_plan(ws, [{"op": "reorder", "order": ["x", "a", "b"]}], [c])
    assert orchestrator.plan_order(ws) == ["x", "a", "b"]


def test_full_task_cannot_start_after_failed_or_blocked_pilot(ws):
    c = _cause(ws)
    orchestrator.mutate_plan(ws, [
        {"op": "add", "task": {"id": "p", "question": "q", "scale": "pilot"}},
        {"op": "add", "task": {"id": "f", "question": "q", "dependencies": ["p"]}},
        {"op": "add", "task": {"id": "p2", "question": "q", "scale": "pilot"}},
        {"op": "add", "task": {"id": "f2", "question": "q", "dependencies": ["p2"]}},
    ], [c])
    orchestrator.update_task(ws, "p", "failed")
    with pytest.raises(PlanError, match="failed"):
        orchestrator.update_task(ws, "f", "running")
    gates.pilot_gate(ws, "p2", ready=False, refs=[c], reason="proxy metric collapsed")
    with pytest.raises(PlanError, match="not ready"):
        orchestrator.update_task(ws, "f2", "running")


def test_pilot_to_full_needs_readiness(ws):
    c = _cause(ws)
    orchestrator.mutate_plan(ws, [{"op": "add", "task": {"id": "p", "question": "q", "scale": "pilot"}}], [c])
    with pytest.raises(PlanError, match="pilot-readiness"):
        orchestrator.mutate_plan(ws, [{"op": "rescale", "task_id": "p", "scale": "full"}], [c])
    gates.pilot_gate(ws, "p", ready=True, refs=[c])
    orchestrator.mutate_plan(ws, [{"op": "rescale", "task_id": "p", "scale": "full"}], [c])
    assert orchestrator.get_task(ws, "p").scale == "full"


def test_stop_conditions(ws):
    c = _cause(ws)
    orchestrator.mutate_plan(ws, [{"op": "add", "task": {
        "id": "a", "question": "q", "stop_conditions": [{"type": "max-failures", "value": 2}]}}], [c])
    orchestrator.update_task(ws, "a", "running", failed_attempt=True)
    t = orchestrator.update_task(ws, "a", failed_attempt=True)
    assert t.status == "stopped" and "max-failures" in t.stop_reason


def test_transition_counts_match_instrumented_advances(ws):
    performed = []
    real = orchestrator.advance_stage

    def spy(w, nxt, **kw):
        performed.append((w.stage, nxt))
        return real(w, nxt, **kw)

    stages = ["planning", "experiment", "experiment", "validation", "review", "reflection", "writing",
              "writing", "review"]
    for s in stages:
        spy(ws, s)
    assert audit.transition_pairs(ws.events()) == performed
