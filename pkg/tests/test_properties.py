"""Randomised invariants. Each suite runs at least 1000 examples."""

from __future__ import annotations

import copy
import shutil
import tempfile
from pathlib import Path

import pytest
from hypothesis import given, settings, strategies as st

from harness import audit, budget, evidence, gates, memory, orchestrator, replay, roles
from harness.config import ACTIONS, ROLES, default_config, validate_config
from harness.evidence import EDGE_KINDS, MaturityLevel as M, evaluate_claim
from harness.orchestrator import TaskRecord
from harness.store import Workspace, WorkspaceError, strip_timestamps, tree_digest

from oracles import claim_oracle, level_invariant

N = settings(max_examples=1000)

ART_KINDS = ("result-table", "run-log", "run-manifest")

op_st = st.one_of(
    st.tuples(st.just("art"), st.sampled_from(ART_KINDS), st.integers(0, 3)),
    st.tuples(st.just("claim"), st.integers(0, 2)),
    st.tuples(st.just("validate"), st.integers(0, 2), st.booleans()),
    st.tuples(st.just("attach"), st.integers(0, 2), st.integers(0, 9), st.sampled_from(EDGE_KINDS)),
    st.tuples(st.just("promote"), st.integers(0, 2), st.integers(0, 9)),
    st.tuples(st.just("demote"), st.integers(0, 2)),
    st.tuples(st.just("task"), st.integers(0, 3), st.integers(0, 40)),
    st.tuples(st.just("spend"), st.integers(0, 3), st.integers(0, 60), st.sampled_from(budget.OUTCOMES)),
    st.tuples(st.just("advance"), st.integers(0, 3)),
    st.tuples(st.just("finding"), st.integers(0, 9), st.sampled_from(("allow", "block"))),
)
ops_st = st.lists(op_st, max_size=6)


def apply_op(ws: Workspace, op: tuple) -> None:
    arts = [a.id for a in ws.artifacts()]
    kind = op[0]
    try:
        if kind == "art":
            n = len(ws.artifacts(current_only=False))
            ws.write_artifact(f"iterations/{ws.iteration:04d}/a{n}.json", {"v": op[2], "values": {"x": op[2]}},
                              op[1], "experimenter", meta={"condition": f"k{op[2]}"})
        elif kind == "claim":
            evidence.register_claim(ws, f"c{op[1]}", "s", maturity="PilotSignal")
        elif kind == "validate":
            evidence.record_validation(ws, f"c{op[1]}", op[2])
        elif kind == "attach" and arts:
            evidence.attach_edges(ws, f"c{op[1]}", [(arts[op[2] % len(arts)], op[3])])
        elif kind == "promote" and arts:
            c = evidence.get_claim(ws, f"c{op[1]}")
            evidence.promote(ws, c.id, M(min(c.level + 1, M.AuditedClaim)), [(arts[op[2] % len(arts)], "supports")])
        elif kind == "demote":
            evidence.demote(ws, f"c{op[1]}")
        elif kind == "task" and arts:
            orchestrator.mutate_plan(ws, [{"op": "add", "task": {"id": f"t{op[1]}", "question": "q",
                                                                 "budget_units": op[2]}}], [arts[0]])
        elif kind == "spend":
            budget.record_outcome(ws, f"t{op[1]}", op[2], op[3])
        elif kind == "advance":
            options = orchestrator.allowed_next(ws)
            if options:
                orchestrator.advance_stage(ws, options[op[1] % len(options)])
        elif kind == "finding" and len(arts) >= 2:
            a, b = arts[op[1] % len(arts)], arts[(op[1] + 1) % len(arts)]
            gates.log_decision(ws, gates.GateDecision("validation", op[2], gates.detect_duplicates(ws, [a, b])))
    except (WorkspaceError, ValueError):
        pass


def build(root: Path, ops) -> Workspace:
    cfg = default_config()
    cfg["budget"]["total_units"] = 100.0
    ws = Workspace.init(root, config=cfg, fsync=False)
    for op in ops:
        apply_op(ws, op)
    return ws


@N
@given(ops_st)
def test_replay_determinism(ops):
    with tempfile.TemporaryDirectory() as d:
        a = build(Path(d) / "a", ops)
        b = build(Path(d) / "b", ops)
        assert strip_timestamps(a.events()) == strip_timestamps(b.events())
        ok, diffs = replay.verify(a)
        assert ok, diffs
        assert replay.fold(a.events()) == replay.fold(b.events())
        a.close()
        b.close()


@N
@given(ops_st)
def test_ladder_soundness_at_every_event(ops):
    with tempfile.TemporaryDirectory() as d:
        ws = build(Path(d) / "w", ops)
        for e in ws.events("claim-update"):
            for r in e.payload.get("records", []):
                if r["collection"] != "claims":
                    continue
                c = evidence.ClaimRecord.from_dict(r["data"])
                views = evidence.edge_views(ws, c)
                if any(ak is None for _, ak, _ in views):
                    assert c.level <= M.PilotSignal
                else:
                    assert level_invariant(c.level, views, c.validation_status), (e.seq, c)
        ws.close()


task_st = st.builds(
    lambda i, units, deps, fam, scale: TaskRecord(f"t{i}", "q", budget_units=units, dependencies=deps,
                                                  family=fam, scale=scale),
    st.integers(0, 9), st.integers(0, 50), st.lists(st.integers(0, 9).map(lambda i: f"t{i}"), max_size=3),
    st.sampled_from(("", "eval")), st.sampled_from(("pilot", "full")),
)


def _acyclic(tasks):
    seen: dict[str, TaskRecord] = {}
    for t in tasks:
        if t.id in seen:
            continue
        t.dependencies = [d for d in t.dependencies if d in seen]
        seen[t.id] = t
    return list(seen.values())


@N
@given(
    st.lists(task_st, max_size=8).map(_acyclic),
    st.integers(0, 200),
    st.lists(st.integers(0, 40), max_size=4),
    st.lists(st.integers(1, 20), max_size=2),
)
def test_budget_conservation_in_schedule(tasks, total, spent, check_costs):
    led = {"total_units": float(total), "spends": [{"units": float(s)} for s in spent], "sanity_checks": []}
    checks = [budget.SanityCheck(f"sc{i}", {"family": "eval"}, float(c), "x") for i, c in enumerate(check_costs)]
    s = budget.schedule(tasks, led, checks)
    scheduled = [n for layer in s.layers for n in layer]
    cost = {t.id: t.budget_units for t in tasks} | {c.node_id: c.cost_units for c in checks}
    assert sum(cost[n] for n in scheduled) <= max(budget.remaining(led), 0.0) + 1e-9
    assert not set(scheduled) & set(s.deferred)
    deps = {t.id: set(t.dependencies) for t in tasks}
    for node, targets in s.checks.items():
        for t in targets:
            deps[t].add(node)
    for n in scheduled:
        for dep in deps.get(n, ()):
            assert dep in scheduled and s.layer_of(dep) < s.layer_of(n)
    assert set(scheduled) | set(s.deferred) == set(cost) - {c.node_id for c in checks if c.node_id not in s.checks}


_TEMPLATES = tempfile.TemporaryDirectory()
_LEDGER_TEMPLATE = Path(_TEMPLATES.name) / "ledger"
build(_LEDGER_TEMPLATE, [("art", "run-log", 0), ("task", 0, 10), ("task", 1, 10)]).close()


@N
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 70), st.sampled_from(budget.OUTCOMES)), max_size=4))
def test_budget_conservation_in_ledger(spends):
    with tempfile.TemporaryDirectory() as d:
        shutil.copytree(_LEDGER_TEMPLATE, Path(d) / "w")
        ws = Workspace.open(Path(d) / "w", fsync=False)
        for tid, units, outcome in spends:
            before = budget.remaining(budget.ledger(ws))
            try:
                budget.record_outcome(ws, f"t{tid}", units, outcome)
            except budget.BudgetExceeded:
                assert units > before
                assert budget.remaining(budget.ledger(ws)) == before
            led = budget.ledger(ws)
            assert budget.remaining(led) >= 0
            assert budget.remaining(led) + sum(s["units"] for s in led["spends"]) == led["total_units"]
        ws.close()


_AUTH_WS = Workspace.init(Path(_TEMPLATES.name) / "auth", fsync=False)
role_st = st.one_of(st.sampled_from(ROLES), st.text(max_size=12))
action_st = st.one_of(st.sampled_from(ACTIONS), st.text(max_size=12))


@N
@given(role_st, action_st, st.sampled_from(ROLES), st.sampled_from(ACTIONS), st.booleans())
def test_authority_totality(role, action, drop_role, drop_action, drop_row):
    matrix = roles.authority_matrix(_AUTH_WS)
    if role in ROLES and action in ACTIONS:
        assert roles.is_allowed(_AUTH_WS, role, action) is matrix[role][action]
    elif role != "system":
        with pytest.raises(roles.AuthorityError):
            roles.is_allowed(_AUTH_WS, role, action)
    cfg = copy.deepcopy(default_config())
    if drop_row:
        del cfg["authority"][drop_role]
        want = f"authority matrix lacks role {drop_role!r}"
    else:
        del cfg["authority"][drop_role][drop_action]
        want = f"authority matrix lacks explicit entry for ({drop_role}, {drop_action})"
    assert validate_config(cfg) == [want]


edge_st = st.tuples(st.sampled_from(EDGE_KINDS), st.sampled_from(("result-table", "run-log", "run-manifest", None)))


@N
@given(
    st.lists(edge_st, max_size=8),
    st.permutations(range(8)),
    st.sampled_from(list(M)),
    st.sampled_from(evidence.VALIDATION_STATUSES),
    st.sampled_from(sorted(evidence.USAGE_REQUIREMENT)),
)
def test_check_claim_equals_rule_table_oracle(edges, seqs, level, status, usage):
    views = [(k, a, seqs[i]) for i, (k, a) in enumerate(edges)]
    got = evaluate_claim(level, views, status, usage)
    assert (got.outcome, got.level if got.outcome != "block" else None) == claim_oracle(level, views, status, usage)


@N
@given(ops_st)
def test_auditor_is_read_only(ops):
    with tempfile.TemporaryDirectory() as d:
        ws = build(Path(d) / "w", ops)
        before = tree_digest(ws.root)
        rep = audit.extract_conversions(ws)
        audit.failure_registry(ws, rep)
        audit.transition_matrix(ws)
        audit.review_to_action([ws])
        replay.verify(ws)
        assert tree_digest(ws.root) == before
        ws.close()


@N
@given(st.floats(0, 1), st.floats(0, 1e3), st.floats(0, 1e3), st.floats(0.1, 1e3))
def test_decay_monotone(rel, t1, t2, half):
    lo, hi = sorted((t1, t2))
    assert 0 <= memory.decay(rel, hi, half) <= memory.decay(rel, lo, half) <= rel
