from __future__ import annotations

import pytest

from harness import gates, roles
from harness.config import default_config
from harness.gates import ValidatorFinding


def _f(validator, severity):
    return ValidatorFinding(validator, validator, [], severity, "repair-task")


def test_rule_table_defaults():
    cfg = default_config()
    assert gates.aggregate(cfg, []) == "allow"
    assert gates.aggregate(cfg, [_f("ci-inversion", "minor")]) == "allow"
    assert gates.aggregate(cfg, [_f("ci-inversion", "major")]) == "downgrade"
    assert gates.aggregate(cfg, [_f("ci-inversion", "major"), _f("ci-inversion", "critical")]) == "block"
    assert gates.aggregate(cfg, [_f("stale-number", "critical")]) == "downgrade"


def test_duplicates_across_conditions(ws):
    a = ws.write_artifact("iterations/0000/a.json", {"v": 1}, "run-log", "experimenter", meta={"condition": "x"})
    b = ws.write_artifact("iterations/0000/b.json", {"v": 1}, "run-log", "experimenter", meta={"condition": "y"})
    c = ws.write_artifact("iterations/0000/c.json", {"v": 2}, "run-log", "experimenter", meta={"condition": "y"})
    (f,) = gates.detect_duplicates(ws, [a.id, b.id, c.id])
    assert f.offending_artifacts == [a.id, b.id] and f.severity == "critical"
    assert f.detail["duplicates"] == [b.id]


def test_duplicate_within_one_condition_is_fine(ws):
    a = ws.write_artifact("iterations/0000/a.json", {"v": 1}, "run-log", "experimenter", meta={"condition": "x"})
    b = ws.write_artifact("iterations/0000/b.json", {"v": 1}, "run-log", "experimenter", meta={"condition": "x"})
    assert gates.detect_duplicates(ws, [a.id, b.id]) == []


def test_ci_inversion():
    stats = [(0.5, 0.4, 0.6), (0.7, 0.4, 0.6), (float("nan"), 0, 1)]
    found = gates.detect_ci_inversion(stats, "art-0001")
    assert [(f.detail["index"], f.failure_class) for f in found] == [(1, "ci-inversion"), (2, "non-finite statistic")]
    assert all(f.offending_artifacts == ["art-0001"] for f in found)


def test_stale_numbers_and_untracked_numerals():
    draft = {"numbers": [{"name": "ratio", "value": 4.1}], "text": "A 4.1x gain over 12 runs."}
    found = gates.detect_stale_numbers(draft, {"values": {"ratio": 2.7}}, draft_id="art-0002",
                                       canonical_id="art-0001")
    crit = [f for f in found if f.severity == "critical"]
    untracked = [f for f in found if f.severity == "minor"]
    assert len(crit) == 1 and crit[0].detail["canonical"] == 2.7
    assert [f.detail["numeral"] for f in untracked] == ["12"]
    assert untracked[0].recommended_action == "none"


def test_stale_numbers_tolerance_ignores_formatting():
    draft = {"numbers": [{"name": "ratio", "value": 2.7000000000001}]}
    assert gates.detect_stale_numbers(draft, {"values": {"ratio": 2.7}}) == []


def test_manifest_mismatch():
    (f,) = gates.detect_manifest_mismatch({"features": 16384}, {"config": {"features": 1024}}, draft_id="art-0002",
                                          manifest_id="art-0001")
    assert f.detail == {"key": "features", "claimed": 16384, "manifest": 1024}
    assert f.offending_artifacts == ["art-0001", "art-0002"]


def test_unsupported_statistic(ws):
    t = ws.write_artifact("iterations/0000/r.json", {"values": {"acc": 0.881}}, "result-table", "experimenter")
    assert gates.detect_unsupported_statistics(ws, [{"name": "acc", "value": 0.881, "source": t.id}]) == []
    (f,) = gates.detect_unsupported_statistics(ws, [{"name": "acc", "value": 0.52, "source": t.id}], draft_id="d")
    assert f.failure_class == "unsupported-statistic" and t.id in f.offending_artifacts
    (g,) = gates.detect_unsupported_statistics(ws, [{"name": "acc", "value": 0.52, "source": "art-9999"}],
                                               draft_id="d")
    assert g.failure_class == "unresolvable source"


def test_missing_review(ws):
    assert gates.detect_missing_review(ws, 0)[0].failure_class == "missing-review"
    ws.write_artifact("iterations/0000/review.json", {"score": "high"}, "review", "critic")
    assert gates.detect_missing_review(ws, 0)
    ws.write_artifact("iterations/0000/review.json", {"score": 6.5}, "review", "critic")
    assert gates.detect_missing_review(ws, 0) == []


def test_quality_gate_downgrades_on_open_major_objection(ws):
    ws.write_artifact("iterations/0000/review.json", {"score": 6.5}, "review", "critic")
    d = gates.evaluate_gate(ws, "quality-gate", 0)
    assert d.outcome == "allow"
    obj = roles.raise_objection(ws, "skeptic", "c", "major", "validation-task")
    d = gates.evaluate_gate(ws, "quality-gate", 0)
    assert d.outcome == "downgrade" and d.cites == [obj.id]


def test_evaluate_is_pure_and_deterministic(ws):
    from harness.store import tree_digest

    ws.write_artifact("iterations/0000/review.json", {"score": 6.5}, "review", "critic")
    before = tree_digest(ws.root)
    a = gates.evaluate_gate(ws, "quality-gate", 0).canonical()
    b = gates.evaluate_gate(ws, "quality-gate", 0).canonical()
    assert a == b and tree_digest(ws.root) == before


def test_log_decision_emits_finding_and_decision_events(ws):
    d = gates.GateDecision("validation", "block", [_f("missing-output", "critical")], iteration=0)
    gates.log_decision(ws, d)
    kinds = [e.kind for e in ws.events()][-2:]
    assert kinds == ["validator-finding", "gate-decision"]
    assert d.findings[0].id in ws.events()[-1].refs
    assert "fnd-0001" in gates.report_table(d)


def test_unknown_validator(ws):
    ws.write_artifact("iterations/0000/draft.json", {}, "draft", "writer")
    with pytest.raises(ValueError):
        gates.run_validator(ws, "no-such-validator", 0)
