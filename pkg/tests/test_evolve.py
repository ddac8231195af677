from __future__ import annotations

import json

import pytest

from harness import audit, evolve, memory
from harness.evolve import HarnessUpdate, ProtectedConstraintError


def _recurring(ws, failure_class, category="analysis", times=2):
    for k in range(times):
        art = ws.write_artifact(f"iterations/0000/reflection/r{k}.json", {"issues": [
            {"category": category, "failure_class": failure_class}]}, "reflection", "supervisor")
        memory.normalize(ws, art.id)
    return memory.issues(ws)[-1]


def _disable_stale(ws):
    cfg = ws.config()
    cfg["gates"]["quality-gate"]["validators"].remove("stale-number")
    ws.save_config(cfg)


def test_recurrence_proposes_mapped_update(ws):
    _disable_stale(ws)
    issue = _recurring(ws, "stale-number")
    (p,) = evolve.evaluate_recurrence(ws)
    assert p.kind == "gate" and p.payload["validator"] == "stale-number" and p.trigger_issues == [issue.id]


def test_single_occurrence_proposes_nothing(ws):
    _disable_stale(ws)
    _recurring(ws, "stale-number", times=1)
    assert evolve.evaluate_recurrence(ws) == []


def test_no_op_updates_skipped(ws):
    _recurring(ws, "stale-number")
    assert evolve.evaluate_recurrence(ws) == []


def test_apply_and_rollback_restore_config_bytes(ws):
    _disable_stale(ws)
    before = ws.config_path.read_bytes()
    _recurring(ws, "stale-number")
    (u,) = evolve.evolve(ws)
    assert "stale-number" in ws.config()["gates"]["quality-gate"]["validators"]
    assert ws.events("harness-update")[-1].payload["config"] == ws.config()
    evolve.rollback_update(ws, u.id)
    assert ws.config_path.read_bytes() == before


def test_weakening_protected_gate_needs_approval(ws):
    issue = _recurring(ws, "noise")
    u = HarnessUpdate("", "gate", [issue.id], {"op": "disable-validator", "gate": "quality-gate",
                                               "validator": "missing-review"})
    with pytest.raises(ProtectedConstraintError, match="pc-missing-review"):
        evolve.apply_update(ws, u)
    assert "missing-review" in ws.config()["gates"]["quality-gate"]["validators"]
    assert ws.events("harness-update")[-1].payload["op"] == "reject"
    u2 = HarnessUpdate("", "gate", [issue.id], dict(u.payload))
    evolve.apply_update(ws, u2, approval=True)
    assert ws.events("harness-update")[-1].payload["approved"] is True


def test_rule_weakening_protected_but_strengthening_allowed(ws):
    issue = _recurring(ws, "noise")
    weaken = HarnessUpdate("", "gate", [issue.id], {"op": "set-rule", "validator": "ci-inversion",
                                                    "severity": "critical", "outcome": "allow"})
    assert evolve.protected_check(ws, weaken)[0] == "requires-approval"
    strengthen = HarnessUpdate("", "gate", [issue.id], {"op": "set-rule", "validator": "stale-number",
                                                        "severity": "critical", "outcome": "block"})
    assert evolve.protected_check(ws, strengthen)[0] == "passed"


def test_update_needs_trigger(ws):
    with pytest.raises(ValueError):
        evolve.apply_update(ws, HarnessUpdate("", "gate", [], {"op": "repair-task"}))


def test_unmapped_class_falls_back_to_overlay(ws):
    _recurring(ws, "vague-related-work", category="writing")
    (p,) = evolve.evaluate_recurrence(ws)
    assert p.kind == "prompt-overlay" and p.payload["roles"] == ["writer", "editor"]


def test_applied_update_recovered_as_harness_conversion(ws):
    _disable_stale(ws)
    _recurring(ws, "stale-number")
    evolve.evolve(ws)
    conv = audit.extract_conversions(ws)
    assert any(c.kind == "harness" and "H7" in c.harness_functions for c in conv.events)


def test_repair_task_goes_before_writing(ws):
    cause = ws.write_artifact("iterations/0000/p.json", {}, "plan", "planner").id
    from harness import orchestrator

    orchestrator.mutate_plan(ws, [{"op": "add", "task": {"id": "w", "question": "q", "kind": "writing"}}], [cause])
    f = {"id": "fnd-0001", "validator_id": "ci-inversion", "failure_class": "ci-inversion",
         "recommended_action": "repair-task"}
    ws.commit("validator-finding", [("findings", "fnd-0001", f)], refs=["fnd-0001"])
    t = evolve.generate_repair_task(ws, f)
    assert orchestrator.plan_order(ws) == [t.id, "w"] and t.cites == ["fnd-0001"]
    assert evolve.generate_repair_task(ws, {**f, "recommended_action": "none"}) is None
