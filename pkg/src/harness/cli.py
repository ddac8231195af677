"""Command-line entry point: ``harness <command> ...``.

Every command that touches a workspace resolves its root from ``--workspace``,
then ``HARNESS_WORKSPACE``, then the current directory.
"""

from __future__ import annotations

import argparse
import json
import os
import random
import sys
from pathlib import Path
from typing import Any, Sequence

from harness import audit, budget, evidence, evolve, fixtures, gates, memory, orchestrator, replay
from harness import scenario as scen
from harness.orchestrator import TaskRecord
from harness.store import Workspace, WorkspaceError, dump_pretty

ENV_WORKSPACE = "HARNESS_WORKSPACE"


def _root(args: argparse.Namespace) -> Path:
    return Path(args.workspace or os.environ.get(ENV_WORKSPACE) or ".")


def _open(args: argparse.Namespace, readonly: bool = False) -> Workspace:
    return Workspace.open(_root(args), readonly=readonly)


def _load_json(text_or_path: str) -> Any:
    p = Path(text_or_path)
    if p.is_file():
        return json.loads(p.read_text(encoding="utf-8"))
    return json.loads(text_or_path)


def _emit_records(records: Sequence[dict[str, Any]]) -> None:
    for r in records:
        print(json.dumps(r, sort_keys=True))


def _sidecar(root: Path) -> Path:
    root = root.resolve()
    return root.parent / f"{root.name}.injections.jsonl"


def _report_file(root: Path) -> Path:
    root = root.resolve()
    return root.parent / f"{root.name}.report.json"


# -- kernel commands ---------------------------------------------------------------


def _cmd_init(args: argparse.Namespace) -> int:
    config = _load_json(args.config) if args.config else None
    ws = Workspace.init(_root(args), config=config, name=args.name)
    print(f"initialized {ws.root} at {ws.position[0]}:{ws.position[1]}")
    ws.close()
    return 0


def _cmd_advance(args: argparse.Namespace) -> int:
    ws = _open(args)
    try:
        if args.finish:
            orchestrator.finish(ws)
            print("finished")
            return 0
        options = orchestrator.allowed_next(ws)
        target = args.to or (options[0] if options else None)
        if target is None:
            print("no further stage", file=sys.stderr)
            return 1
        try:
            orchestrator.advance_stage(ws, target)
        except orchestrator.BlockedTransition as blocked:
            d = blocked.decision
            print(f"blocked: {d.reason}", file=sys.stderr)
            if d.rollback_target:
                print(f"rollback target: {d.rollback_target[0]}:{d.rollback_target[1]}", file=sys.stderr)
            return 2
        it, stage = ws.position
        print(f"{it}:{stage}")
        return 0
    finally:
        ws.close()


def _cmd_plan_mutate(args: argparse.Namespace) -> int:
    ws = _open(args)
    try:
        mutations = _load_json(args.mutations)
        tasks = orchestrator.mutate_plan(ws, mutations, args.cause, role=args.role)
        for t in tasks:
            print(f"{t.id:<24} {t.status:<10} deps={','.join(t.dependencies) or '-'}")
        return 0
    finally:
        ws.close()


def _cmd_plan_show(args: argparse.Namespace) -> int:
    ws = _open(args, readonly=True)
    records = [t.to_dict() for t in orchestrator.plan(ws)]
    if args.format == "records":
        _emit_records(records)
    else:
        for t in records:
            print(f"{t['id']:<24} {t['kind']:<12} {t['status']:<10} deps={','.join(t['dependencies']) or '-'}")
    return 0


def _cmd_claim_check(args: argparse.Namespace) -> int:
    ws = _open(args, readonly=True)
    outcome = evidence.check_claim(ws, args.claim, args.usage)
    level = outcome.level.name if outcome.level is not None else "-"
    print(f"{outcome.outcome} {level} {outcome.reason}".rstrip())
    return 0 if outcome.outcome == "allow" else 1


def _cmd_claim_promote(args: argparse.Namespace) -> int:
    ws = _open(args)
    try:
        edges = [tuple(e.split(":", 1)) for e in args.edge]
        claim = evidence.promote(ws, args.claim, args.to, edges, role=args.role, refs=args.ref)
        print(f"{claim.id} {claim.maturity}")
        return 0
    except evidence.ClaimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    finally:
        ws.close()


def _cmd_claim_trace(args: argparse.Namespace) -> int:
    ws = _open(args, readonly=True)
    steps = evidence.trace(ws, args.claim)
    if args.format == "records":
        _emit_records([s.to_dict() for s in steps])
        return 0
    for s in steps:
        extra = f" via {s.via}" if s.via else ""
        sup = f" superseded by {s.superseded_by}" if s.superseded_by else ""
        print(f"{s.seq:>6} {s.relation:<12} {s.ref:<12} {s.rel_path or '-'}{extra}{sup}")
    return 0


def _cmd_gate_run(args: argparse.Namespace) -> int:
    ws = _open(args)
    try:
        decision = gates.run_gate(ws, args.gate, args.iteration)
        if args.format == "records":
            _emit_records([f.to_dict() for f in decision.findings] + [decision.to_dict()])
        else:
            print(gates.report_table(decision))
        return 1 if decision.outcome == "block" else 0
    finally:
        ws.close()


def _cmd_memory_digest(args: argparse.Namespace) -> int:
    ws = _open(args, readonly=True)
    counts = memory.digest(ws, args.min_frequency)
    if args.format == "records":
        _emit_records([{"category": c, "count": n} for c, n in counts.items()])
    else:
        print(memory.digest_table(counts))
    return 0


def _cmd_memory_ingest(args: argparse.Namespace) -> int:
    ws = _open(args)
    try:
        fixtures.ingest_digest(ws, _load_json(args.stream))
        print(f"{len(memory.issues(ws))} issues")
        return 0
    finally:
        ws.close()


def _cmd_schedule(args: argparse.Namespace) -> int:
    if args.plan:
        data = _load_json(args.plan)
        tasks = [TaskRecord.from_dict(t) for t in (data["tasks"] if isinstance(data, dict) else data)]
        total = float(data.get("total_units", 1e12)) if isinstance(data, dict) else 1e12
        checks = [budget.SanityCheck.from_dict(c) for c in data.get("sanity_checks", [])] \
            if isinstance(data, dict) else []
        s = budget.schedule(tasks, {"total_units": total, "spends": []}, checks)
    else:
        s = budget.schedule_workspace(_open(args, readonly=True), args.iteration)
    if args.format == "records":
        _emit_records([s.to_dict()])
    else:
        print(budget.format_schedule(s))
    return 0


def _cmd_evolve_propose(args: argparse.Namespace) -> int:
    ws = _open(args, readonly=True)
    proposals = evolve.evaluate_recurrence(ws)
    for p in proposals:
        check, c = evolve.protected_check(ws, p)
        rec = {**p.to_dict(), "protected_check": check}
        if c:
            rec["constraint"] = c["id"]
        print(json.dumps(rec, sort_keys=True))
    return 0


def _cmd_evolve_apply(args: argparse.Namespace) -> int:
    ws = _open(args)
    try:
        if args.update:
            pool = [evolve.HarnessUpdate.from_dict(_load_json(args.update))]
        else:
            pool = evolve.evaluate_recurrence(ws)
        code = 0
        for p in pool:
            try:
                u = evolve.apply_update(ws, p, approval=args.approve)
                print(f"applied {u.id} {u.kind} {u.payload['op']}")
            except evolve.ProtectedConstraintError as exc:
                print(f"rejected: {exc}", file=sys.stderr)
                code = 1
        return code
    finally:
        ws.close()


def _cmd_evolve_rollback(args: argparse.Namespace) -> int:
    ws = _open(args)
    try:
        u = evolve.rollback_update(ws, args.update_id)
        print(f"{u.id} {u.status}")
        return 0
    finally:
        ws.close()


# -- audit -----------------------------------------------------------------------------


def _audit_roots(args: argparse.Namespace) -> list[Path]:
    roots = [Path(p) for p in args.workspaces] or [_root(args)]
    out: list[Path] = []
    for r in roots:
        if (r / "workspace.json").is_file():
            out.append(r)
        elif r.is_dir():
            # a directory of workspaces, as in the multi-trace fixtures
            out.extend(sorted(p for p in r.iterdir() if (p / "workspace.json").is_file()))
    if not out:
        raise WorkspaceError(f"no workspace under {', '.join(map(str, roots))}")
    return out


def _cmd_audit(args: argparse.Namespace) -> int:
    wss = [Workspace.open(r, readonly=True) for r in _audit_roots(args)]
    records = args.format == "records"
    if args.what == "conversions":
        for ws in wss:
            rep = audit.extract_conversions(ws)
            if records:
                _emit_records([e.to_dict() for e in rep.events])
            else:
                if len(wss) > 1:
                    print(f"# {ws.root}")
                print(audit.format_conversions(rep))
    elif args.what == "transitions":
        counts = audit.transition_matrix(wss)
        if records:
            _emit_records([{"from": a, "to": b, "count": n} for (a, b), n in sorted(counts.items())])
        else:
            print(audit.format_matrix(counts))
    elif args.what == "reviews":
        rows, agg = audit.review_to_action(wss)
        if records:
            _emit_records([{"movement": m, **v} for m, v in agg.items()])
        else:
            print(audit.format_review_table(agg))
    elif args.what == "failures":
        for ws in wss:
            failure_rows = audit.failure_registry(ws)
            if records:
                _emit_records([r.to_dict() for r in failure_rows])
            else:
                print(audit.format_failures(failure_rows))
    return 0


# -- scenario driver ----------------------------------------------------------------------


def _cmd_run(args: argparse.Namespace) -> int:
    sc = scen.load_scenario(args.scenario)
    root = _root(args)
    report = scen.run_scenario(sc, root, seed=args.seed, sidecar=None if sc.projects else _sidecar(root))
    _report_file(root).write_text(dump_pretty(report.to_dict()), encoding="utf-8")
    if args.format == "records":
        _emit_records([report.to_dict()])
    else:
        print(scen.format_report(report))
    return 0 if report.passed else 1


def _cmd_inject(args: argparse.Namespace) -> int:
    ws = _open(args)
    try:
        params = {}
        for kv in args.param:
            k, _, v = kv.partition("=")
            try:
                params[k] = json.loads(v)
            except json.JSONDecodeError:
                params[k] = v
        it = ws.iteration if args.iteration is None else args.iteration
        inj = scen.Injection(at_iteration=it, kind=args.kind, parameters=params)
        ids = scen.inject(ws, inj, sidecar=_sidecar(ws.root), rng=random.Random(args.seed or 0))
        print(" ".join(ids) if ids else "no artifacts touched")
        return 0
    except scen.InjectionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    finally:
        ws.close()


def _cmd_report(args: argparse.Namespace) -> int:
    root = _root(args)
    saved = _report_file(root)
    if args.scenario:
        sc = scen.load_scenario(args.scenario)
        prior = json.loads(saved.read_text(encoding="utf-8")) if saved.is_file() else {}
        ws = Workspace.open(root, readonly=True)
        report = scen.build_report(sc, ws, scen.read_sidecar(_sidecar(root)), prior.get("schedules"))
        data = report.to_dict()
        text = scen.format_report(report)
        passed = report.passed
    elif saved.is_file():
        data = json.loads(saved.read_text(encoding="utf-8"))
        text = dump_pretty(data)
        passed = data["passed"]
    else:
        print(f"no saved report for {root}; pass --scenario", file=sys.stderr)
        return 2
    if args.format == "records":
        _emit_records([data])
    else:
        print(text)
    return 0 if passed else 1


def _cmd_fixtures_build(args: argparse.Namespace) -> int:
    manifests = fixtures.build_fixtures(args.out)
    for m in manifests:
        print(f"{m.name:<20} {m.provenance:<16} {', '.join(m.files[:3])}{' ...' if len(m.files) > 3 else ''}")
    return 0


def _cmd_replay_verify(args: argparse.Namespace) -> int:
    ws = _open(args, readonly=True)
    ok, diffs = replay.verify(ws)
    for d in diffs:
        print(f"differs: {d}")
    print("replay ok" if ok else f"replay mismatch ({len(diffs)})")
    return 0 if ok else 1


# -- parser ---------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="harness", description="File-backed research harness kernel.")
    parser.add_argument("--workspace", "-w", help=f"workspace root (default ${ENV_WORKSPACE} or .)")
    sub = parser.add_subparsers(dest="command", required=True)

    def fmt(p: argparse.ArgumentParser) -> None:
        p.add_argument("--format", choices=("table", "records"), default="table")

    p = sub.add_parser("init", help="create a workspace")
    p.add_argument("--config", help="config JSON file")
    p.add_argument("--name")
    p.set_defaults(func=_cmd_init)

    p = sub.add_parser("advance", help="move to the next stage")
    p.add_argument("--to", help="target stage (default: next in the pipeline)")
    p.add_argument("--finish", action="store_true", help="close the final stage")
    p.set_defaults(func=_cmd_advance)

    plan = sub.add_parser("plan", help="mutate or show the task plan").add_subparsers(dest="plan_command", required=True)
    p = plan.add_parser("mutate")
    p.add_argument("--cause", action="append", required=True, help="id of the artifact or record causing it")
    p.add_argument("--mutations", required=True, help="JSON list or file of mutations")
    p.add_argument("--role", default="planner")
    p.set_defaults(func=_cmd_plan_mutate)
    p = plan.add_parser("show")
    fmt(p)
    p.set_defaults(func=_cmd_plan_show)

    claim = sub.add_parser("claim", help="check, promote or trace claims").add_subparsers(dest="claim_command", required=True)
    p = claim.add_parser("check")
    p.add_argument("claim")
    p.add_argument("--usage", required=True)
    p.set_defaults(func=_cmd_claim_check)
    p = claim.add_parser("promote")
    p.add_argument("claim")
    p.add_argument("--to", required=True)
    p.add_argument("--edge", action="append", default=[], help="artifact-id:edge-kind")
    p.add_argument("--ref", action="append", default=[])
    p.add_argument("--role", default="supervisor")
    p.set_defaults(func=_cmd_claim_promote)
    p = claim.add_parser("trace")
    p.add_argument("claim")
    fmt(p)
    p.set_defaults(func=_cmd_claim_trace)

    gate = sub.add_parser("gate", help="run a gate").add_subparsers(dest="gate_command", required=True)
    p = gate.add_parser("run")
    p.add_argument("--iteration", type=int)
    p.add_argument("--gate", default="quality-gate")
    fmt(p)
    p.set_defaults(func=_cmd_gate_run)

    mem = sub.add_parser("memory", help="issue digest and reflection ingest").add_subparsers(dest="memory_command", required=True)
    p = mem.add_parser("digest")
    p.add_argument("--min-frequency", type=int, default=2)
    fmt(p)
    p.set_defaults(func=_cmd_memory_digest)
    p = mem.add_parser("ingest")
    p.add_argument("--stream", required=True, help="reflection stream JSON")
    p.set_defaults(func=_cmd_memory_ingest)

    p = sub.add_parser("schedule", help="print schedule layers")
    p.add_argument("--plan", help="plan JSON file; default is the workspace plan")
    p.add_argument("--iteration", type=int)
    fmt(p)
    p.set_defaults(func=_cmd_schedule)

    evo = sub.add_parser("evolve", help="propose, apply or roll back harness updates").add_subparsers(dest="evolve_command", required=True)
    p = evo.add_parser("propose")
    p.set_defaults(func=_cmd_evolve_propose)
    p = evo.add_parser("apply")
    p.add_argument("--approve", action="store_true", help="approve updates touching protected constraints")
    p.add_argument("--update", help="update JSON (default: all current proposals)")
    p.set_defaults(func=_cmd_evolve_apply)
    p = evo.add_parser("rollback")
    p.add_argument("update_id")
    p.set_defaults(func=_cmd_evolve_rollback)

    p = sub.add_parser("audit", help="recover conversion units from traces")
    p.add_argument("what", choices=("conversions", "transitions", "reviews", "failures"))
    p.add_argument("workspaces", nargs="*", help="workspace roots or directories of workspaces")
    fmt(p)
    p.set_defaults(func=_cmd_audit)

    p = sub.add_parser("run", help="run a scenario file")
    p.add_argument("--scenario", required=True)
    p.add_argument("--seed", type=int)
    fmt(p)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("inject", help="inject a failure into the workspace")
    p.add_argument("kind", choices=sorted(scen.INJECTION_KINDS))
    p.add_argument("--iteration", type=int)
    p.add_argument("--param", action="append", default=[], help="key=value (value parsed as JSON if possible)")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_inject)

    p = sub.add_parser("report", help="print or re-check a scenario report")
    p.add_argument("--scenario")
    fmt(p)
    p.set_defaults(func=_cmd_report)

    fx = sub.add_parser("fixtures", help="generate fixture workspaces").add_subparsers(dest="fixtures_command", required=True)
    p = fx.add_parser("build")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_fixtures_build)

    rp = sub.add_parser("replay", help="rebuild state from the event log").add_subparsers(dest="replay_command", required=True)
    p = rp.add_parser("verify")
    p.set_defaults(func=_cmd_replay_verify)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (WorkspaceError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
