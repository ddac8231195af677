"""Scripted end-to-end runs with controlled failure injection.

A scenario is pure data: role scripts, an iteration count, injections and
the outcomes the run is expected to show. Injections are applied by the
driver and recorded in a sidecar log outside the workspace; the kernel
never reads that log.
"""

from __future__ import annotations

import copy
import json
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable

from harness import audit, budget, evidence, evolve, gates, memory, orchestrator, roles
from harness.config import STAGES, default_config, validate_config
from harness.store import ArtifactRecord, Workspace, WorkspaceError, dump_pretty

# kind -> stage after which it is applied by default
INJECTION_KINDS = {
    "duplicate-files": "experiment",
    "invert-ci": "experiment",
    "count-mismatch": "experiment",
    "missing-output": "experiment",
    "stale-table": "writing",
    "unsupported-stat": "writing",
    "pilot-as-general-claim": "writing",
    "remove-review-score": "review",
}
FLAGS = ("memory", "debate", "evolution")
OUTCOME_TYPES = ("gate", "finding", "conversion", "rollback", "count", "check-before", "task")
MAX_ATTEMPTS = 3


class ScenarioError(WorkspaceError):
    pass


class InjectionError(WorkspaceError):
    pass


@dataclass
class Injection:
    at_iteration: int
    kind: str
    parameters: dict[str, Any] = field(default_factory=dict)
    after_stage: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in INJECTION_KINDS:
            raise ScenarioError(f"unknown injection kind {self.kind!r}")
        if self.after_stage is None:
            self.after_stage = INJECTION_KINDS[self.kind]
        if self.after_stage not in STAGES:
            raise ScenarioError(f"injection stage {self.after_stage!r} is not a stage")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class Scenario:
    name: str
    iterations: int
    scripts: list[roles.AgentScript]
    injections: list[Injection] = field(default_factory=list)
    expected_outcomes: list[dict[str, Any]] = field(default_factory=list)
    flags: dict[str, bool] = field(default_factory=lambda: {"memory": True, "debate": True, "evolution": False})
    config_overrides: dict[str, Any] = field(default_factory=dict)
    seed: int = 0
    description: str = ""
    projects: list["Scenario"] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "description": self.description,
            "iterations": self.iterations,
            "seed": self.seed,
            "flags": dict(self.flags),
            "config_overrides": self.config_overrides,
            "scripts": [s.to_dict() for s in self.scripts],
            "injections": [i.to_dict() for i in self.injections],
            "expected_outcomes": self.expected_outcomes,
            "projects": [p.to_dict() for p in self.projects],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Scenario":
        problems = schema_problems(data)
        if problems:
            raise ScenarioError("invalid scenario: " + "; ".join(problems))
        flags = {"memory": True, "debate": True, "evolution": False, **data.get("flags", {})}
        return cls(
            name=data["name"],
            description=data.get("description", ""),
            iterations=int(data.get("iterations", 0)),
            seed=int(data.get("seed", 0)),
            flags=flags,
            config_overrides=data.get("config_overrides", {}),
            scripts=[roles.AgentScript.from_dict(s) for s in data.get("scripts", [])],
            injections=[Injection(**i) for i in data.get("injections", [])],
            expected_outcomes=list(data.get("expected_outcomes", [])),
            projects=[cls.from_dict(p) for p in data.get("projects", [])],
        )


def load_scenario(path: str | Path) -> Scenario:
    return Scenario.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def schema_problems(data: Any) -> list[str]:
    if not isinstance(data, dict):
        return ["scenario must be an object"]
    out = []
    if not isinstance(data.get("name"), str) or not data.get("name"):
        out.append("name is required")
    projects = data.get("projects", [])
    if projects:
        if not isinstance(projects, list):
            return out + ["projects must be a list"]
        for i, p in enumerate(projects):
            out += [f"project {i}: {m}" for m in schema_problems(p)]
        return out
    n = data.get("iterations")
    if not isinstance(n, int) or n < 1:
        out.append("iterations must be a positive integer")
        n = 0
    for key in data.get("flags", {}):
        if key not in FLAGS:
            out.append(f"unknown flag {key!r}")
    seen_roles = set()
    for i, s in enumerate(data.get("scripts", [])):
        try:
            script = roles.AgentScript.from_dict(s)
        except (KeyError, TypeError, WorkspaceError) as exc:
            out.append(f"script {i}: {exc}")
            continue
        if script.role in seen_roles:
            out.append(f"duplicate script for role {script.role!r}")
        seen_roles.add(script.role)
        for e in script.entries:
            its = e["iteration"]
            for it in its if isinstance(its, list) else [its]:
                if it != "*" and (not isinstance(it, int) or not 0 <= it < n):
                    out.append(f"script {script.role}: iteration {it!r} out of range")
            if e["stage"] not in STAGES:
                out.append(f"script {script.role}: unknown stage {e['stage']!r}")
    for i, inj in enumerate(data.get("injections", [])):
        try:
            injection = Injection(**inj)
        except (TypeError, ScenarioError) as exc:
            out.append(f"injection {i}: {exc}")
            continue
        if not 0 <= injection.at_iteration < n:
            out.append(f"injection {i}: iteration {injection.at_iteration} out of range")
    for i, o in enumerate(data.get("expected_outcomes", [])):
        if not isinstance(o, dict) or o.get("type") not in OUTCOME_TYPES:
            out.append(f"expected outcome {i}: type must be one of {', '.join(OUTCOME_TYPES)}")
    if data.get("config_overrides"):
        cfg = deep_merge(default_config(), data["config_overrides"])
        out += [f"config: {p}" for p in validate_config(cfg)]
    return out


def deep_merge(base: dict[str, Any], override: dict[str, Any]) -> dict[str, Any]:
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            deep_merge(base[k], v)
        else:
            base[k] = copy.deepcopy(v)
    return base


# -- injection -----------------------------------------------------------------


def _reregister(ws: Workspace, art: ArtifactRecord) -> str:
    rec = ws.register_artifact(
        ws.abspath(art.rel_path), art.kind, art.producer_role, art.iteration, meta=art.meta, sources=art.sources
    )
    return rec.id


def _rewrite_json(ws: Workspace, art: ArtifactRecord, content: Any) -> str:
    ws.abspath(art.rel_path).write_text(dump_pretty(content), encoding="utf-8")
    return _reregister(ws, art)


def _one(ws: Workspace, iteration: int, kind: str, what: str) -> ArtifactRecord:
    art = ws.latest(iteration, kind)
    if art is None:
        raise InjectionError(f"{what}: no {kind} artifact at iteration {iteration}")
    return art


def inject(
    ws: Workspace,
    injection: Injection,
    *,
    sidecar: str | Path | None = None,
    rng: random.Random | None = None,
) -> list[str]:
    """Mutate the target iteration's artifacts; returns the injected artifact ids."""
    it = injection.at_iteration
    if it < 0 or it > ws.iteration:
        raise InjectionError(f"iteration {it} does not exist in this workspace")
    p = injection.parameters
    kind = injection.kind
    rng = rng or random.Random(0)
    touched: list[str] = []
    if kind == "duplicate-files":
        logs = [a for a in ws.latest_attempt(it, "run-log")]
        src_cond = p.get("source_condition", "baseline")
        dst_cond = p.get("target_condition", "variant")
        sources = sorted((a for a in logs if a.meta.get("condition") == src_cond), key=lambda a: a.rel_path)
        targets = sorted((a for a in logs if a.meta.get("condition") == dst_cond), key=lambda a: a.rel_path)
        k = int(p.get("k", 4))
        if not sources or len(targets) < k:
            raise InjectionError(f"duplicate-files needs a {src_cond} replicate and {k} {dst_cond} replicates")
        source = rng.choice(sources) if p.get("random_source") else sources[0]
        raw = ws.read_artifact(source)
        for t in targets[:k]:
            ws.abspath(t.rel_path).write_bytes(raw)
            touched.append(_reregister(ws, t))
    elif kind == "invert-ci":
        art = _canonical_table(ws, it)
        content = ws.read_artifact_json(art)
        intervals = content.get("intervals", [])
        k = int(p.get("k", 1))
        if len(intervals) < k:
            raise InjectionError(f"invert-ci needs {k} intervals, found {len(intervals)}")
        for iv in intervals[:k]:
            width = float(iv["upper"]) - float(iv["lower"]) or 1.0
            iv["point"] = float(iv["upper"]) + width
        touched.append(_rewrite_json(ws, art, content))
    elif kind == "count-mismatch":
        art = _one(ws, it, "run-manifest", kind)
        content = ws.read_artifact_json(art)
        key = p.get("key", "features")
        content.setdefault("config", {})[key] = p.get("value", 1024)
        touched.append(_rewrite_json(ws, art, content))
    elif kind == "missing-output":
        out_kind = p.get("kind", "result-table")
        arts = [a for a in ws.latest_attempt(it, out_kind) if a.meta.get("task")]
        if not arts:
            raise InjectionError(f"missing-output: no task output of kind {out_kind} at iteration {it}")
        for a in arts:
            ws.abspath(a.rel_path).unlink()
            touched.append(a.id)
    elif kind in ("stale-table", "unsupported-stat", "pilot-as-general-claim"):
        art = _one(ws, it, "draft", kind)
        draft = ws.read_artifact_json(art)
        if kind == "stale-table":
            section, name, value = "numbers", p.get("name", "speedup"), p.get("value", 4.1)
            hit = [e for e in draft.get(section, []) if e.get("name") == name]
        elif kind == "unsupported-stat":
            section, name, value = "statistics", p.get("name", "accept_rate"), p.get("value", 0.52)
            hit = [e for e in draft.get(section, []) if e.get("name") == name]
        else:
            name = p.get("claim")
            hit = [u for u in draft.get("claim_uses", []) if name in (None, u["claim"])]
        if not hit:
            raise InjectionError(f"{kind}: draft has no matching entry {name!r}")
        for e in hit:
            if kind == "pilot-as-general-claim":
                e["usage"] = p.get("usage", "general-claim")
            else:
                e["value"] = value
        touched.append(_rewrite_json(ws, art, draft))
    elif kind == "remove-review-score":
        art = _one(ws, it, "review", kind)
        review = ws.read_artifact_json(art)
        review.pop("score", None)
        touched.append(_rewrite_json(ws, art, review))
    if sidecar is not None:
        _log_sidecar(ws, sidecar, {"injection": injection.to_dict(), "artifacts": touched})
    return touched


def _canonical_table(ws: Workspace, it: int) -> ArtifactRecord:
    tables = ws.latest_attempt(it, "result-table")
    canon = [a for a in tables if a.meta.get("canonical")] or tables
    if not canon:
        raise InjectionError(f"no result-table at iteration {it}")
    return canon[-1]


def _log_sidecar(ws: Workspace, sidecar: str | Path, entry: dict[str, Any]) -> None:
    path = Path(sidecar).resolve()
    if path.is_relative_to(ws.root):
        raise InjectionError("the injection log must live outside the workspace")
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", encoding="utf-8") as fh:
        fh.write(json.dumps(entry, sort_keys=True) + "\n")


def read_sidecar(path: str | Path) -> list[dict[str, Any]]:
    p = Path(path)
    if not p.is_file():
        return []
    return [json.loads(line) for line in p.read_text(encoding="utf-8").splitlines() if line.strip()]


# -- driver ------------------------------------------------------------------------


@dataclass
class RunReport:
    scenario: str
    workspace: str
    passed: bool
    decisions: list[dict[str, Any]]
    findings: list[dict[str, Any]]
    rollbacks: list[dict[str, Any]]
    conversions: list[dict[str, Any]]
    conversion_summary: dict[str, Any]
    schedules: dict[str, dict[str, Any]]
    injections: list[dict[str, Any]]
    outcomes: list[dict[str, Any]]
    applied_updates: list[str] = field(default_factory=list)
    projects: list["RunReport"] = field(default_factory=list)

    @property
    def critical_findings(self) -> list[dict[str, Any]]:
        return [f for f in self.findings if f["severity"] == "critical"]

    @property
    def blocks(self) -> list[dict[str, Any]]:
        return [d for d in self.decisions if d["outcome"] == "block"]

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["projects"] = [p.to_dict() for p in self.projects]
        return d


class _Run:
    def __init__(self, sc: Scenario, ws: Workspace, sidecar: Path | None, seed: int):
        self.sc = sc
        self.ws = ws
        self.sidecar = sidecar
        self.rng = random.Random(seed)
        self.names = roles.Names()
        self.scripts = {s.role: self._filter(s) for s in sc.scripts}
        self.pending = list(sc.injections)
        self.injected: list[dict[str, Any]] = []
        self.schedules: dict[str, dict[str, Any]] = {}
        self.applied: list[str] = []
        self.last_validation: gates.GateDecision | None = None

    def _filter(self, script: roles.AgentScript) -> roles.AgentScript:
        if self.sc.flags.get("debate", True):
            return script
        entries = [{k: v for k, v in e.items() if k not in ("objections", "resolve")} for e in script.entries]
        return roles.AgentScript(script.role, entries, script.on_overlay)

    # one pass over the current stage
    def stage(self) -> None:
        ws = self.ws
        it, stage = ws.position
        if stage == "planning" and self.sc.flags.get("memory", True):
            memory.sync_global(ws)
        produced: list[str] = []
        for role in ws.config()["role_order"]:
            script = self.scripts.get(role)
            if script is None:
                continue
            em = roles.invoke_role(ws, role, stage, script, self.names)
            produced += em.artifacts
        if stage == "planning" and it > 0:
            self._repairs(it - 1)
        if stage == "planning":
            self.schedules[str(it)] = budget.schedule_workspace(ws).to_dict()
        if stage == "reflection" and self.sc.flags.get("memory", True):
            for aid in produced:
                art = ws.artifact(aid)
                if art is not None and art.kind == "reflection":
                    memory.normalize(ws, aid)
        for inj in list(self.pending):
            if inj.at_iteration == it and inj.after_stage == stage:
                self.pending.remove(inj)
                ids = inject(ws, inj, sidecar=self.sidecar, rng=self.rng)
                self.injected.append({"injection": inj.to_dict(), "artifacts": ids})
        if stage == "validation":
            self.last_validation = gates.run_gate(ws, "validation", it)
        if stage == "quality-gate":
            decision = gates.run_quality_gate(ws, it)
            for f in decision.findings:
                if f.validator_id == "pilot-boundary" and f.detail.get("claim") and ws.get_record("claims", f.detail["claim"]):
                    evidence.restrict(ws, f.detail["claim"], "pilot estimate", cause_refs=[f.id])

    def _repairs(self, prev: int) -> None:
        for rec in gates.decisions(self.ws):
            if rec.get("iteration") != prev:
                continue
            for fid in rec.get("findings", []):
                f = self.ws.get_record("findings", fid)
                if f and f.get("recommended_action") == "repair-task":
                    evolve.generate_repair_task(self.ws, f)

    def run(self) -> None:
        ws = self.ws
        last = self.sc.iterations - 1
        while True:
            it, stage = ws.position
            self.stage()
            if stage == "quality-gate":
                if self.sc.flags.get("evolution", False):
                    self.applied += [u.id for u in evolve.evolve(ws)]
                if it == last:
                    orchestrator.finish(ws)
                    return
                self._advance("planning")
                continue
            if stage == "validation" and self.last_validation and self.last_validation.outcome == "block":
                self._rollback(it, "experiment", self.last_validation)
                continue
            self._advance(STAGES[STAGES.index(stage) + 1])

    def _advance(self, nxt: str) -> None:
        try:
            orchestrator.advance_stage(self.ws, nxt)
        except orchestrator.BlockedTransition as blocked:
            target = blocked.decision.rollback_target
            if not target:
                raise
            self._rollback(int(target[0]), target[1], blocked.decision)

    def _rollback(self, it: int, stage: str, decision: Any) -> None:
        if self.ws.attempt(it) >= MAX_ATTEMPTS:
            raise ScenarioError(f"iteration {it} rolled back {MAX_ATTEMPTS} times without recovering")
        orchestrator.rollback(self.ws, it, stage, decision)


def run_scenario(
    sc: Scenario,
    root: str | Path,
    *,
    seed: int | None = None,
    sidecar: str | Path | None = None,
    fsync: bool = False,
) -> RunReport:
    root = Path(root)
    if sc.projects:
        return _run_projects(sc, root, seed=seed, fsync=fsync)
    return _run_single(sc, root, seed=seed, sidecar=sidecar, fsync=fsync)


def _run_single(
    sc: Scenario, root: Path, *, seed: int | None, sidecar: str | Path | None, fsync: bool,
    global_memory: Path | None = None,
) -> RunReport:
    cfg = deep_merge(default_config(), sc.config_overrides)
    problems = validate_config(cfg)
    if problems:
        raise ScenarioError("invalid config overrides: " + "; ".join(problems))
    side = Path(sidecar) if sidecar else root.parent / f"{root.name}.injections.jsonl"
    ws = Workspace.init(root, config=cfg, name=sc.name, global_memory=global_memory, fsync=fsync)
    try:
        run = _Run(sc, ws, side if sc.injections else None, sc.seed if seed is None else seed)
        run.run()
        report = build_report(sc, ws, run.injected, run.schedules)
        report.applied_updates = run.applied
        return report
    finally:
        ws.close()


def _run_projects(sc: Scenario, root: Path, *, seed: int | None, fsync: bool) -> RunReport:
    root.mkdir(parents=True, exist_ok=True)
    shared = root / "global-memory"
    reports = [
        _run_single(p, root / p.name, seed=seed, sidecar=root / f"{p.name}.injections.jsonl", fsync=fsync,
                    global_memory=shared)
        for p in sc.projects
    ]
    outcomes = [o for r in reports for o in r.outcomes]
    return RunReport(
        scenario=sc.name,
        workspace=str(root),
        passed=all(r.passed for r in reports),
        decisions=[], findings=[], rollbacks=[], conversions=[], conversion_summary={},
        schedules={}, injections=[], outcomes=outcomes, projects=reports,
    )


def build_report(
    sc: Scenario,
    ws: Workspace,
    injected: list[dict[str, Any]] | None = None,
    schedules: dict[str, dict[str, Any]] | None = None,
) -> RunReport:
    decisions = [
        {"id": d["id"], "gate_id": d["gate_id"], "iteration": d.get("iteration"), "outcome": d["outcome"],
         "findings": d.get("findings", []), "rollback_target": d.get("rollback_target")}
        for d in gates.decisions(ws)
    ]
    found = [f.to_dict() for f in gates.findings(ws)]
    rollbacks = [
        {"id": e.id, "iteration": e.iteration, "target": e.payload["target"], "refs": e.refs}
        for e in ws.events("rollback")
        if not e.payload.get("noop")
    ]
    conv = audit.extract_conversions(ws)
    report = RunReport(
        scenario=sc.name,
        workspace=str(ws.root),
        passed=False,
        decisions=decisions,
        findings=found,
        rollbacks=rollbacks,
        conversions=[c.to_dict() for c in conv.events],
        conversion_summary=conv.summary(),
        schedules=schedules or {},
        injections=injected or [],
        outcomes=[],
    )
    report.outcomes = [check_outcome(ws, report, o) for o in sc.expected_outcomes]
    report.passed = all(o["passed"] for o in report.outcomes)
    return report


def check_outcome(ws: Workspace, report: RunReport, expected: dict[str, Any]) -> dict[str, Any]:
    t = expected["type"]
    it = expected.get("iteration")
    observed: Any = None
    if t == "gate":
        rows = [d for d in report.decisions if d["gate_id"] == expected.get("gate", "quality-gate")
                and (it is None or d["iteration"] == it)]
        observed = [d["outcome"] for d in rows]
        ok = expected["outcome"] in observed
    elif t == "finding":
        rows = [f for f in report.findings if f["failure_class"] == expected["failure_class"]
                and (it is None or f["iteration"] == it)
                and ("severity" not in expected or f["severity"] == expected["severity"])]
        observed = len(rows)
        ok = (observed == 0) if expected.get("absent") else (observed > 0)
    elif t == "conversion":
        rows = [c for c in report.conversions
                if ("kind" not in expected or c["kind"] == expected["kind"])
                and ("latency" not in expected or c["latency"] == expected["latency"])
                and ("functions" not in expected or c["harness_functions"] == sorted(expected["functions"]))
                and (it is None or c["signal_ref"]["iteration"] == it)]
        observed = len(rows)
        ok = observed >= int(expected.get("min", 1))
    elif t == "rollback":
        rows = [r for r in report.rollbacks if it is None or r["iteration"] == it]
        observed = [[r["target"]["iteration"], r["target"]["stage"]] for r in rows]
        ok = list(expected["target"]) in observed
    elif t == "count":
        what = expected["what"]
        observed = {"critical_findings": len(report.critical_findings), "blocks": len(report.blocks),
                    "rollbacks": len(report.rollbacks)}[what]
        ok = observed == expected["value"]
    elif t == "check-before":
        observed, ok = _check_before(ws, report, expected)
    elif t == "task":
        rec = ws.get_record("tasks", expected["task"])
        observed = rec.get("cites") if rec else None
        prefix = expected.get("cites_prefix", "")
        ok = rec is not None and any(c.startswith(prefix) for c in rec.get("cites", []))
    else:
        raise ScenarioError(f"unknown outcome type {t!r}")
    return {"expected": expected, "observed": observed, "passed": bool(ok)}


def _check_before(ws: Workspace, report: RunReport, expected: dict[str, Any]) -> tuple[Any, bool]:
    family = expected.get("family")
    checks = [c for c in budget.sanity_checks(ws) if family is None or c.guard_for.get("family") == family]
    if not checks:
        return "no sanity check registered", False
    if "cost" in expected and any(c.cost_units != float(expected["cost"]) for c in checks):
        return [c.cost_units for c in checks], False
    first = min(int(k) for k in report.schedules) if report.schedules else 0
    origin_it = min(ws.get_record("spends", c.origin)["iteration"] for c in checks)
    later = {k: v for k, v in report.schedules.items() if int(k) > max(origin_it, first - 1)}
    seen = 0
    for sched in later.values():
        layers = sched["layers"]
        where = {n: i for i, layer in enumerate(layers) for n in layer}
        for c in checks:
            node = f"check:{c.id}"
            for target in sched["checks"].get(node, []):
                if target not in where:
                    continue
                seen += 1
                if node not in where or where[node] >= where[target]:
                    return f"{node} not before {target}", False
    return seen, seen > 0


def format_report(report: RunReport) -> str:
    lines = [f"scenario {report.scenario}: {'PASS' if report.passed else 'FAIL'}  ({report.workspace})"]
    for sub in report.projects:
        lines += ["  " + line for line in format_report(sub).splitlines()]
    if report.projects:
        return "\n".join(lines)
    lines.append(f"{'gate':<16} {'iter':>4} {'outcome':<10} findings")
    for d in report.decisions:
        lines.append(f"{d['gate_id']:<16} {d['iteration']!s:>4} {d['outcome']:<10} {','.join(d['findings']) or '-'}")
    crit = len(report.critical_findings)
    lines.append(f"critical findings: {crit}  blocks: {len(report.blocks)}  rollbacks: {len(report.rollbacks)}")
    s = report.conversion_summary
    lines.append(f"conversions: {s.get('count')} (median latency {s.get('median_latency')}, "
                 f"max {s.get('max_latency')})")
    for o in report.outcomes:
        mark = "ok  " if o["passed"] else "FAIL"
        lines.append(f"  {mark} {json.dumps(o['expected'], sort_keys=True)} observed={o['observed']}")
    return "\n".join(lines)


def critical_naming_injected(report: RunReport) -> list[tuple[str, bool]]:
    """For each critical finding, does it name an injected artifact?"""
    injected = {a for entry in report.injections for a in entry["artifacts"]}
    return [(f["id"], bool(set(f["offending_artifacts"]) & injected)) for f in report.critical_findings]


def iter_reports(report: RunReport) -> Iterable[RunReport]:
    yield report
    for p in report.projects:
        yield from iter_reports(p)
