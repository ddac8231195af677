"""Acceptance criteria 1 to 10, one PASS/FAIL line each."""

from __future__ import annotations

import io
import json
import os
import random
import re
import subprocess
import sys
import time
from contextlib import redirect_stdout
from pathlib import Path

from harness import audit, budget, fixtures, memory, orchestrator
from harness import scenario as scen
from harness.cli import main
from harness.config import STAGES
from harness.store import Workspace

from conftest import open_all
from oracles import pairwise_transitions

TESTS = Path(__file__).resolve().parent


def _run(tmp_path: Path, name: str):
    t0 = time.perf_counter()
    rep = scen.run_scenario(fixtures.scenario(name), tmp_path / name)
    return rep, time.perf_counter() - t0


def test_conversion_events(tmp_path, criterion):
    t0 = time.perf_counter()
    expected = fixtures.build_conversion_fixture(tmp_path / "conv")
    rep = audit.extract_conversions(Workspace.open(tmp_path / "conv", readonly=True))
    elapsed = time.perf_counter() - t0
    s = rep.summary()
    got = sorted((e.signal_ref[0], e.kind, tuple(sorted(e.harness_functions))) for e in rep.events)
    want = sorted((e["signal"], e["kind"], tuple(sorted(e["functions"]))) for e in expected["events"])
    criterion(1, "conversion-events fixture", [
        ("8 events", s["count"] == 8, s["count"]),
        ("median latency 1", s["median_latency"] == 1, s["median_latency"]),
        ("max latency 3", s["max_latency"] == 3, s["max_latency"]),
        ("kinds and functions match manifest", got == want, got),
        ("under 1 s", elapsed < 1.0, f"{elapsed:.3f}s"),
    ])


def test_five_classes(tmp_path, criterion):
    rep, elapsed = _run(tmp_path, "five-class")
    ws = Workspace.open(rep.workspace, readonly=True)
    at = fixtures.scenario("five-class").injections[0].at_iteration
    crit = rep.critical_findings
    injected_paths = {ws.artifact(a).rel_path for e in rep.injections for a in e["artifacts"]}
    naming = [bool({ws.artifact(a).rel_path for a in f["offending_artifacts"]} & injected_paths) for f in crit]
    next_tasks = [t for t in orchestrator.plan(ws) if t.iteration == at + 1]
    repaired = [any(f["id"] in t.cites for t in next_tasks) for f in crit]
    out = io.StringIO()
    with redirect_stdout(out):
        rc = main(["-w", rep.workspace, "audit", "failures", "--format", "records"])
    rows = [json.loads(line) for line in out.getvalue().splitlines()]
    criterion(2, "five classes injected into the clean scenario", [
        ("exactly 5 critical findings", len(crit) == 5, len(crit)),
        ("each names an injected artifact", all(naming) and len(naming) == 5, naming),
        ("next iteration has a citing repair task per finding", all(repaired) and len(repaired) == 5, repaired),
        ("audit failures shows 5 converted rows", rc == 0 and len(rows) == 5 and all(r["converted"] for r in rows),
         [r["converted"] for r in rows]),
        ("under 5 s", elapsed < 5.0, f"{elapsed:.3f}s"),
    ])


def test_removed_review_score(tmp_path, criterion):
    rep, _ = _run(tmp_path, "hard-block")
    at = fixtures.scenario("hard-block").injections[0].at_iteration
    blocks = [d for d in rep.blocks if d["gate_id"] == "quality-gate" and d["iteration"] == at]
    targets = [d["rollback_target"] for d in blocks]
    rolled = [r["target"] for r in rep.rollbacks if r["iteration"] == at]
    criterion(3, "removed review score blocks and rolls back to review", [
        ("quality gate blocks", bool(blocks), [d["outcome"] for d in rep.decisions if d["iteration"] == at]),
        ("rollback target is (same iteration, review)", [at, "review"] in targets, targets),
        ("rollback executed", {"iteration": at, "stage": "review"} in rolled, rolled),
    ])


def _random_log(root: Path, rng: random.Random) -> Workspace:
    ws = Workspace.init(root, fsync=False)
    it, stage = 0, "ideation"
    for _ in range(rng.randint(0, 40)):
        r = rng.random()
        if r < 0.35:
            ws.log("stage-end", iteration=it, stage=stage)
        elif r < 0.7:
            stage = rng.choice(STAGES)
            it += rng.random() < 0.2
            ws.log("stage-start", iteration=it, stage=stage)
        else:
            ws.log(rng.choice(("gate-decision", "task-update", "rollback", "claim-update")), iteration=it,
                   stage=stage)
    ws.close()
    return Workspace.open(root, readonly=True)


def test_transition_counts(built, tmp_path, criterion):
    cells = audit.transition_matrix(open_all(built / "stage-transitions"))
    checks = [(f"{a}->{b} = {n}", cells.get((a, b)) == n, cells.get((a, b)))
              for (a, b), n in fixtures.TRANSITION_COUNTS.items()]
    rng = random.Random(20261014)
    identity = {s: s for s in STAGES}
    mismatches = 0
    for i in range(100):
        ws = _random_log(tmp_path / f"log{i}", rng)
        if audit.transition_matrix(ws, identity) != pairwise_transitions(ws.events()):
            mismatches += 1
    checks.append(("100 random logs equal the pairwise-scan oracle", mismatches == 0, f"{mismatches} mismatches"))
    criterion(4, "transition counts", checks)


def test_review_to_action(built, criterion):
    _, agg = audit.review_to_action(open_all(built / "review-action"))
    rows = {"down": 10, "flat": 6, "up": 10, "no-prior": 11}
    deltas = {"down": -0.82, "flat": 0.00, "up": 0.70}
    high = {"down": 8.7, "flat": 6.5, "up": 4.0, "no-prior": 3.8}
    checks = [(f"{m} rows {n}", agg[m]["rows"] == n, agg[m]["rows"]) for m, n in rows.items()]
    checks += [(f"{m} mean delta {d:+.2f}", round(agg[m]["mean_delta"], 2) == d, agg[m]["mean_delta"])
               for m, d in deltas.items()]
    checks += [(f"{m} high-severity mean {v} +/- 0.005", abs(agg[m]["mean_high_severity"] - v) <= 0.005,
                agg[m]["mean_high_severity"]) for m, v in high.items()]
    criterion(5, "review-to-action table", checks)


def test_digest(tmp_path, criterion):
    ws = Workspace.init(tmp_path / "d", fsync=False)
    fixtures.ingest_digest(ws, fixtures.digest_stream())
    counts = memory.digest(ws)
    want = {"experiment": 212, "writing": 89, "analysis": 84, "system": 20, "ideation": 4, "pipeline": 3,
            "planning": 3, "efficiency": 1}
    routing = ws.config()["routing"]
    criterion(6, "evolution digest counts and routing", [
        ("416 total", sum(counts.values()) == 416, sum(counts.values())),
        ("per-category counts", counts == want, counts),
        ("experiment -> experimenter, planner", set(routing["experiment"]) == {"experimenter", "planner"},
         routing["experiment"]),
        ("analysis -> supervisor, critic", set(routing["analysis"]) == {"supervisor", "critic"}, routing["analysis"]),
        ("writing -> writer, editor", set(routing["writing"]) == {"writer", "editor"}, routing["writing"]),
    ])


def test_caching_pilot(tmp_path, criterion):
    rep, _ = _run(tmp_path, "caching-pilot")
    ws = Workspace.open(rep.workspace, readonly=True)
    checks_reg = budget.sanity_checks(ws)
    costs = [c.cost_units for c in checks_reg]
    registered_at = min((e.iteration for e in ws.events("harness-update")), default=None)
    later = {k: v for k, v in rep.schedules.items() if registered_at is not None and int(k) > registered_at}
    ordered = []
    for sched in later.values():
        layer = {n: i for i, nodes in enumerate(sched["layers"]) for n in nodes}
        for node, targets in sched["checks"].items():
            ordered += [node in layer and t in layer and layer[node] < layer[t] for t in targets]
    conv = [c for c in rep.conversions if c["kind"] == "harness" and c["latency"] == 0
            and {"H6", "H7"} <= set(c["harness_functions"])]
    criterion(7, "caching-pilot sanity check", [
        ("registers SanityCheck(cost=10)", costs == [10.0], costs),
        ("each later schedule places the check before the guarded task", bool(ordered) and all(ordered),
         {k: v["checks"] for k, v in later.items()}),
        ("latency-0 harness conversion tagged H6, H7", bool(conv), [c["harness_functions"] for c in rep.conversions]),
    ])


def test_evolution_differential(tmp_path, criterion):
    def caught(name):
        rep, _ = _run(tmp_path, name)
        gate_of = {f: d["gate_id"] for d in rep.decisions for f in d["findings"]}
        return sorted({f["iteration"] for f in rep.findings
                       if f["failure_class"] == "stale-number" and gate_of.get(f["id"]) == "quality-gate"})

    on, off = caught("evolution-on"), caught("evolution-off")
    criterion(8, "evolution differential on stale-table", [
        ("ON catches iteration 3 at the gate", on == [3], on),
        ("OFF does not", off == [], off),
    ])


REQUIRED_SUITES = {
    "replay determinism": "test_replay_determinism",
    "budget conservation": "test_budget_conservation_in_ledger",
    "budget conservation (schedule)": "test_budget_conservation_in_schedule",
    "ladder soundness": "test_ladder_soundness_at_every_event",
    "authority totality": "test_authority_totality",
    "check_claim equals oracle": "test_check_claim_equals_rule_table_oracle",
    "auditor read-only": "test_auditor_is_read_only",
}


def _passing_examples(text: str) -> dict[str, int]:
    """Sum 'N passing examples' across phases for each test in the statistics block."""
    out: dict[str, int] = {}
    current = None
    for line in text.splitlines():
        m = re.match(r"\S+::(\w+):$", line)
        if m:
            current = m.group(1)
            out[current] = 0
            continue
        m = re.search(r"(\d+) passing examples", line)
        if m and current:
            out[current] += int(m.group(1))
    return out


def test_property_suites(criterion):
    env = {**os.environ, "PYTHONDONTWRITEBYTECODE": "1"}
    cmd = [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", "--hypothesis-show-statistics",
           str(TESTS / "test_properties.py"),
           f"{TESTS / 'test_evidence.py'}::test_rule_table_matches_oracle_on_full_enumeration"]
    t0 = time.perf_counter()
    proc = subprocess.run(cmd, capture_output=True, text=True, cwd=TESTS.parent, env=env)
    elapsed = time.perf_counter() - t0
    stats = _passing_examples(proc.stdout)
    checks = [(f"{label} >= 1000 cases", int(stats.get(fn, 0)) >= 1000, stats.get(fn))
              for label, fn in REQUIRED_SUITES.items()]
    checks.append(("full enumeration and all suites pass", proc.returncode == 0, proc.stdout.strip().splitlines()[-1:]))
    checks.append(("total under 60 s", elapsed < 60.0, f"{elapsed:.1f}s"))
    criterion(9, "property suites", checks)


def test_clean_run(tmp_path, criterion):
    rep, _ = _run(tmp_path, "clean")
    its = sorted({d["iteration"] for d in rep.decisions})
    criterion(10, "clean 3-iteration run", [
        ("3 iterations", its == [0, 1, 2], its),
        ("0 critical findings", len(rep.critical_findings) == 0, len(rep.critical_findings)),
        ("0 blocks", len(rep.blocks) == 0, len(rep.blocks)),
    ])
