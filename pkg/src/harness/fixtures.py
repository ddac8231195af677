"""Generated fixture workspaces and scenario files for the acceptance suite.

Nothing here is a committed blob: each builder documents, in code, the
counts it encodes, and every fixture ships a manifest naming its source and
the numbers the auditor is expected to reproduce from it.
"""

from __future__ import annotations

import copy
import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from harness import budget, evidence, gates, memory, orchestrator, roles
from harness.config import ISSUE_CATEGORIES
from harness.scenario import Scenario
from harness.store import Workspace, WorkspaceError, dump_pretty

PROVENANCE = ("published-table", "constructed")


@dataclass
class FixtureManifest:
    name: str
    provenance: str
    source_citation: str
    files: list[str]
    expected: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.provenance not in PROVENANCE:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if not self.source_citation:
            raise ValueError(f"fixture {self.name} must cite its source")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def _ws(root: Path, **kw: Any) -> Workspace:
    return Workspace.init(root, fsync=False, **kw)


# -- scenario scripts ------------------------------------------------------------

REVIEW_SCORES = (6.0, 6.5, 7.0, 7.5, 8.0, 8.0)
CANONICAL_VALUES = {"speedup": 2.7, "accept_rate": 0.881}
MANIFEST_CONFIG = {"features": 16384, "n": 1000, "seeds": [0, 1, 2]}
INTERVALS = [
    {"name": f"workload-{k}", "point": 2.0 + 0.1 * k, "lower": 1.8 + 0.1 * k, "upper": 2.3 + 0.1 * k}
    for k in range(7)
]


def _entry(it: int, stage: str, **kw: Any) -> dict[str, Any]:
    return {"iteration": it, "stage": stage, **kw}


def base_scripts(iterations: int) -> dict[str, dict[str, Any]]:
    """Scripts for a clean research loop: plan, run, validate, review, reflect, write."""
    s: dict[str, dict[str, Any]] = {
        r: {"role": r, "entries": [], "on_overlay": []}
        for r in ("planner", "experimenter", "methodologist", "critic", "skeptic", "supervisor", "writer")
    }
    s["planner"]["entries"].append(
        _entry(0, "ideation", artifacts=[{
            "path": "iterations/0000/ideation/brief.json", "kind": "plan", "name": "@brief",
            "content": {"topic": "response caching for retrieval", "hypotheses": ["caching reduces latency"]},
        }])
    )
    for it in range(iterations):
        d = f"iterations/{it:04d}"
        exp, val, wr, claim = f"exp-{it}", f"val-{it}", f"write-{it}", f"c-speedup-{it}"
        s["planner"]["entries"].append(_entry(it, "planning", artifacts=[{
            "path": f"{d}/planning/proposal.json", "kind": "plan", "name": "@proposal",
            "content": {"iteration": it, "focus": "measure caching speedup"},
        }], plan=[{"cause": ["@proposal"], "mutations": [
            {"op": "add", "task": {"id": exp, "question": "Measure cached vs uncached latency", "kind": "experiment",
                                   "outputs": ["result-table"], "budget_units": 20}},
            {"op": "add", "task": {"id": val, "question": "Validate result tables against run logs",
                                   "kind": "validation", "dependencies": [exp], "budget_units": 5}},
            {"op": "add", "task": {"id": wr, "question": "Draft the iteration summary", "kind": "writing",
                                   "dependencies": [val], "budget_units": 2}},
        ]}]))
        logs = []
        for cond, n in (("baseline", 4), ("variant", 5)):
            for r in range(1, n + 1):
                logs.append({
                    "path": f"{d}/experiment/{cond}-r{r}.json", "kind": "run-log",
                    "meta": {"condition": cond, "replicate": r, "task": exp},
                    "content": {"condition": cond, "replicate": r, "iteration": it,
                                "latency_ms": round(100 - 10 * (cond == "variant") + r * 0.5 + it * 0.25, 3)},
                })
        s["experimenter"]["entries"].append(_entry(it, "experiment", tasks=[
            {"task": exp, "status": "running"}, {"task": exp, "status": "completed"},
        ], artifacts=[
            *logs,
            {"path": f"{d}/experiment/results.json", "kind": "result-table", "name": "@results",
             "meta": {"canonical": True, "task": exp},
             "content": {"values": dict(CANONICAL_VALUES), "intervals": copy.deepcopy(INTERVALS)}},
            {"path": f"{d}/experiment/manifest.json", "kind": "run-manifest", "name": "@manifest",
             "meta": {"task": exp}, "content": {"config": dict(MANIFEST_CONFIG)}},
        ], spends=[{"task": exp, "units": 20, "outcome": "useful", "telemetry": {"duration": 12}}]))
        s["methodologist"]["entries"].append(_entry(it, "validation", claims=[
            {"op": "register", "claim": claim, "statement": "Caching speeds up retrieval",
             "maturity": "PilotSignal", "scope_label": "pilot estimate"},
            {"op": "attach", "claim": claim, "edges": [{"artifact_id": "@results", "edge_kind": "supports"}]},
            {"op": "validate", "claim": claim, "passed": True, "refs": ["@results"]},
        ], tasks=[{"task": val, "status": "completed"}]))
        s["critic"]["entries"].append(_entry(it, "review", artifacts=[{
            "path": f"{d}/review/review.json", "kind": "review", "name": "@review",
            "content": {"score": REVIEW_SCORES[it % len(REVIEW_SCORES)], "summary": "results consistent with logs"},
        }]))
        s["skeptic"]["entries"].append(_entry(it, "review", objections=[{
            "target": claim, "severity": "minor", "demanded_action": "validation-task",
            "text": "confirm the seed count before generalizing",
        }]))
        s["supervisor"]["entries"].append(_entry(it, "reflection", artifacts=[{
            "path": f"{d}/reflection/reflection.json", "kind": "reflection",
            "content": {"issues": [], "focus_items": ["keep pilot scope explicit"]},
        }]))
        s["writer"]["entries"].append(_entry(it, "writing", artifacts=[{
            "path": f"{d}/writing/draft.json", "kind": "draft", "name": "@draft",
            "content": {
                "title": "Caching pilot summary",
                "text": "Caching speeds up retrieval on the pilot workload.",
                "numbers": [{"name": "speedup", "value": CANONICAL_VALUES["speedup"], "claim": claim}],
                "statistics": [{"name": "accept_rate", "value": CANONICAL_VALUES["accept_rate"],
                                "source": "@results", "claim": claim}],
                "config_claims": {"features": MANIFEST_CONFIG["features"]},
                "manifest": "@manifest",
                "canonical": "@results",
                "claim_uses": [{"claim": claim, "usage": "pilot-mention"}],
            },
        }], tasks=[{"task": wr, "status": "completed"}]))
    return s


def _scenario(name: str, iterations: int, scripts: dict[str, dict[str, Any]], **kw: Any) -> dict[str, Any]:
    return {
        "name": name,
        "iterations": iterations,
        "seed": 0,
        "flags": kw.pop("flags", {"memory": True, "debate": True, "evolution": False}),
        "config_overrides": kw.pop("config_overrides", {}),
        "scripts": list(scripts.values()),
        "injections": kw.pop("injections", []),
        "expected_outcomes": kw.pop("expected_outcomes", []),
        "description": kw.pop("description", ""),
    }


def clean_scenario(iterations: int = 3) -> dict[str, Any]:
    return _scenario(
        "clean", iterations, base_scripts(iterations),
        description="clean baseline; no injected failures",
        expected_outcomes=[
            {"type": "count", "what": "critical_findings", "value": 0},
            {"type": "count", "what": "blocks", "value": 0},
            *({"type": "gate", "iteration": i, "outcome": "allow"} for i in range(iterations)),
        ],
    )


FIVE_CLASSES = (
    ("duplicate-files", "duplicate-results", {"k": 4}),
    ("invert-ci", "ci-inversion", {"k": 1}),
    ("stale-table", "stale-number", {"name": "speedup", "value": 4.1}),
    ("count-mismatch", "manifest-mismatch", {"key": "features", "value": 1024}),
    ("unsupported-stat", "unsupported-statistic", {"name": "accept_rate", "value": 0.52}),
)


def five_class_scenario(at: int = 1) -> dict[str, Any]:
    return _scenario(
        "five-class", 3, base_scripts(3),
        description="the five recovered-failure classes injected into one iteration of the clean loop",
        injections=[{"at_iteration": at, "kind": k, "parameters": p} for k, _, p in FIVE_CLASSES],
        expected_outcomes=[
            {"type": "count", "what": "critical_findings", "value": 5},
            {"type": "gate", "iteration": at, "outcome": "block"},
            *({"type": "finding", "iteration": at, "failure_class": c, "severity": "critical"}
              for _, c, _ in FIVE_CLASSES),
            {"type": "conversion", "latency": 1, "min": 5},
        ],
    )


def hard_block_scenario(at: int = 2) -> dict[str, Any]:
    return _scenario(
        "hard-block", 3, base_scripts(3),
        description="review score removed before the quality gate",
        injections=[{"at_iteration": at, "kind": "remove-review-score", "parameters": {}}],
        expected_outcomes=[
            {"type": "gate", "iteration": at, "outcome": "block"},
            {"type": "rollback", "iteration": at, "target": [at, "review"]},
            {"type": "finding", "iteration": at, "failure_class": "missing-review"},
            {"type": "conversion", "latency": 0, "functions": ["H2", "H7"]},
        ],
    )


def pilot_claim_scenario(at: int = 1) -> dict[str, Any]:
    return _scenario(
        "pilot-claim", 3, base_scripts(3),
        description="a pilot-signal claim used as a general claim in the draft",
        injections=[{"at_iteration": at, "kind": "pilot-as-general-claim", "parameters": {}}],
        expected_outcomes=[
            {"type": "finding", "iteration": at, "failure_class": "pilot-boundary", "severity": "critical"},
            {"type": "conversion", "iteration": at, "latency": 0, "functions": ["H2"]},
        ],
    )


def missing_output_scenario(at: int = 1) -> dict[str, Any]:
    return _scenario(
        "missing-output", 3, base_scripts(3),
        description="a declared task output deleted after the experiment stage",
        injections=[{"at_iteration": at, "kind": "missing-output", "parameters": {"kind": "result-table"}}],
        expected_outcomes=[
            {"type": "gate", "gate": "validation", "iteration": at, "outcome": "block"},
            {"type": "rollback", "iteration": at, "target": [at, "experiment"]},
            {"type": "finding", "iteration": at, "failure_class": "missing-output"},
        ],
    )


def evolution_scenario(enabled: bool) -> dict[str, Any]:
    iterations = 4
    scripts = base_scripts(iterations)
    for e in scripts["supervisor"]["entries"]:
        if e["iteration"] in (1, 2, 3):
            e["artifacts"][0]["content"]["issues"] = [{
                "category": "analysis", "failure_class": "stale-number", "severity": "major",
                "title": "headline number drifted from the canonical table",
                "suggested_action": "re-derive headline numbers from the canonical table before writing",
            }]
    qg = ["missing-review", "duplicate-results", "ci-inversion", "manifest-mismatch", "unsupported-statistic",
          "pilot-boundary"]
    name = "evolution-on" if enabled else "evolution-off"
    return _scenario(
        name, iterations, scripts,
        description="the same stale-number failure injected in iterations 1 to 3 with the stale-number "
                    "validator initially off",
        flags={"memory": True, "debate": True, "evolution": enabled},
        config_overrides={"gates": {"quality-gate": {"validators": qg}}},
        injections=[{"at_iteration": i, "kind": "stale-table", "parameters": {"name": "speedup", "value": 4.1}}
                    for i in (1, 2, 3)],
        expected_outcomes=[
            {"type": "finding", "iteration": 1, "failure_class": "stale-number", "absent": True},
            {"type": "finding", "iteration": 2, "failure_class": "stale-number", "absent": True},
            {"type": "finding", "iteration": 3, "failure_class": "stale-number", "absent": not enabled},
        ],
    )


def caching_pilot_scenario() -> dict[str, Any]:
    iterations = 3
    scripts = base_scripts(iterations)
    pilot = {"id": "cache-pilot", "question": "Pilot the cache warm-up on a small shard", "kind": "experiment",
             "family": "caching", "scale": "pilot", "budget_units": 60,
             "proxy_check": {"name": "throughput sanity check", "cost": 10}}
    full = {"id": "cache-full", "question": "Run the full cache sweep", "kind": "experiment",
            "family": "caching", "scale": "full", "budget_units": 200}
    for e in scripts["planner"]["entries"]:
        if e["stage"] == "planning" and e["iteration"] == 0:
            e["plan"][0]["mutations"].append({"op": "add", "task": pilot})
        if e["stage"] == "planning" and e["iteration"] == 1:
            e["plan"][0]["mutations"].append({"op": "add", "task": full})
    for e in scripts["experimenter"]["entries"]:
        if e["iteration"] == 0:
            e["spends"].append({"task": "cache-pilot", "units": 54, "outcome": "wasteful",
                                "telemetry": {"duration": 54, "note": "throughput collapsed after warm-up"}})
            e["tasks"].append({"task": "cache-pilot", "status": "completed"})
    return _scenario(
        "caching-pilot", iterations, scripts,
        description="a wasteful 54-unit pilot whose declared 10-unit proxy check becomes a scheduling rule",
        expected_outcomes=[
            {"type": "check-before", "family": "caching", "cost": 10},
            {"type": "conversion", "kind": "harness", "latency": 0, "functions": ["H6", "H7"]},
        ],
    )


def cross_project_scenario() -> dict[str, Any]:
    a = base_scripts(2)
    for e in a["supervisor"]["entries"]:
        e["artifacts"][0]["content"]["issues"] = [{
            "category": "experiment", "failure_class": "unseeded-baseline", "severity": "major",
            "suggested_action": "run the baseline under the same seed set as the treatment",
        }]
    b = base_scripts(2)
    b["planner"]["on_overlay"] = [{
        "match": "unseeded-baseline", "stage": "planning",
        "plan": [{"op": "add", "task": {"id": "seed-control-check", "question": "Check baseline seeds match",
                                        "kind": "validation", "budget_units": 1}}],
    }]
    return {
        "name": "cross-project",
        "description": "a recurring lesson learned in one project changes the next project's plan",
        "projects": [
            _scenario("project-a", 2, a),
            _scenario("project-b", 2, b, expected_outcomes=[
                {"type": "task", "task": "seed-control-check", "cites_prefix": "ovl-"},
            ]),
        ],
    }


def all_scenarios() -> dict[str, dict[str, Any]]:
    return {
        "clean": clean_scenario(),
        "five-class": five_class_scenario(),
        "hard-block": hard_block_scenario(),
        "pilot-claim": pilot_claim_scenario(),
        "missing-output": missing_output_scenario(),
        "evolution-on": evolution_scenario(True),
        "evolution-off": evolution_scenario(False),
        "caching-pilot": caching_pilot_scenario(),
        "cross-project": cross_project_scenario(),
    }


def scenario(name: str) -> Scenario:
    return Scenario.from_dict(all_scenarios()[name])


# -- conversion-event fixture --------------------------------------------------------


class _Walker:
    """Moves a workspace through the stage loop, writing a scored review on the way."""

    def __init__(self, ws: Workspace, skip_review: set[int] = frozenset()):
        self.ws = ws
        self.skip_review = set(skip_review)
        self.blocked: list[gates.GateDecision] = []

    def step(self) -> None:
        ws = self.ws
        it, stage = ws.position
        order = ["ideation", "planning", "experiment", "validation", "review", "reflection", "writing",
                 "quality-gate"]
        nxt = "planning" if stage == "quality-gate" else order[order.index(stage) + 1]
        if stage == "review" and it not in self.skip_review:
            path = roles.attempt_path(f"iterations/{it:04d}/review/review.json", ws.attempt(it))
            ws.write_artifact(path, {"score": 7.0}, "review", "critic")
        try:
            orchestrator.advance_stage(ws, nxt)
        except orchestrator.BlockedTransition as blocked:
            self.blocked.append(blocked.decision)
            orchestrator.rollback(ws, it, "review", blocked.decision)
            self.skip_review.discard(it)

    def to(self, iteration: int, stage: str) -> None:
        key = orchestrator.position_key(iteration, stage)
        while orchestrator.position_key(*self.ws.position) < key:
            self.step()


def build_conversion_fixture(root: Path) -> dict[str, Any]:
    """Eight signal-to-update chains with latencies 0,0,0,1,1,1,1,3."""
    ws = _ws(root, name="conversion-events")
    w = _Walker(ws, skip_review={5})
    expected: list[dict[str, Any]] = []

    def art(it: int, rel: str, content: Any, kind: str, role: str, **meta: Any) -> str:
        return ws.write_artifact(f"iterations/{it:04d}/{rel}", content, kind, role, meta=meta).id

    def decide(gate_id: str, findings: list[gates.ValidatorFinding]) -> list[str]:
        cfg = ws.config()
        d = gates.GateDecision(gate_id, gates.aggregate(cfg, findings), findings, iteration=ws.iteration,
                               reason="; ".join(f"{f.validator_id}:{f.failure_class}" for f in findings))
        gates.log_decision(ws, d)
        return [f.id for f in findings]

    # duplicate replicate files caught at validation, contradiction edge next iteration
    w.to(1, "experiment")
    raw = {"condition": "shared", "latency_ms": [101.0, 99.5, 100.25]}
    a1 = art(1, "experiment/ours-r1.json", raw, "run-log", "experimenter", condition="ours")
    a2 = art(1, "experiment/baseline-r1.json", raw, "run-log", "experimenter", condition="baseline")
    evidence.register_claim(ws, "c-dup", "Method beats baseline", role="methodologist")
    evidence.register_claim(ws, "c-dlm", "Language model adaptation transfers", maturity="PilotSignal",
                            role="methodologist")
    (f_dup,) = decide("validation", gates.detect_duplicates(ws, [a1, a2]))
    obj = roles.raise_objection(ws, "skeptic", "c-dlm", "major", "claim-downgrade",
                                text="transfer shown on one corpus only")
    w.to(2, "planning")
    evidence.attach_edges(ws, "c-dup", [(a2, "contradicts")], role="critic", cause_refs=[f_dup])
    expected.append({"case": "duplicate results", "signal": f_dup, "signal_iteration": 1, "update_iteration": 2,
                     "kind": "behavior", "functions": ["H2", "H3"]})
    demoted = evidence.demote(ws, "c-dlm", cause_refs=[obj.id], role="critic")
    roles.resolve_objection(ws, obj.id, ws.events("claim-update")[-1].id, role="critic")
    expected.append({"case": "objection demotes claim", "signal": obj.id, "signal_iteration": 1,
                     "update_iteration": 2, "kind": "behavior", "functions": ["H2", "H5"]})
    assert demoted.maturity == "ExecutionComplete"

    # pilot signal used as a general claim; restricted in the same iteration
    w.to(4, "writing")
    evidence.register_claim(ws, "c-pilot", "Warm cache halves latency", maturity="PilotSignal",
                            role="methodologist")
    draft = {"text": "Warm cache halves latency.", "claim_uses": [{"claim": "c-pilot", "usage": "general-claim"}]}
    d4 = art(4, "writing/draft.json", draft, "draft", "writer")
    (f_pilot,) = decide("quality-gate", gates.detect_pilot_boundary(ws, draft, d4))
    evidence.restrict(ws, "c-pilot", "pilot estimate", cause_refs=[f_pilot], role="editor")
    expected.append({"case": "pilot boundary", "signal": f_pilot, "signal_iteration": 4, "update_iteration": 4,
                     "kind": "behavior", "functions": ["H2"]})

    # missing review score: hard block and rollback to review
    w.to(5, "writing")
    w.step()
    block = w.blocked[-1]
    expected.append({"case": "missing review", "signal": block.findings[0].id, "signal_iteration": 5,
                     "update_iteration": 5, "kind": "behavior", "functions": ["H2", "H7"]})

    # wasteful caching pilot registers a sanity check
    w.to(6, "planning")
    prop = art(6, "planning/proposal.json", {"focus": "cache warm-up"}, "plan", "planner")
    orchestrator.mutate_plan(ws, [{"op": "add", "task": {
        "id": "cache-pilot", "question": "Pilot the cache warm-up", "family": "caching", "scale": "pilot",
        "budget_units": 60, "proxy_check": {"name": "throughput sanity check", "cost": 10}}}], [prop])
    w.to(6, "experiment")
    led, _ = budget.record_outcome(ws, "cache-pilot", 54, "wasteful", role="experimenter")
    spend = led["spends"][-1]["id"]
    expected.append({"case": "wasteful pilot", "signal": spend, "signal_iteration": 6, "update_iteration": 6,
                     "kind": "harness", "functions": ["H6", "H7"]})

    # reflection issue routed to an overlay, acted on three iterations later
    w.to(8, "reflection")
    refl = art(8, "reflection/reflection.json", {"issues": [{
        "category": "experiment", "failure_class": "dead-latent-audit", "severity": "major",
        "suggested_action": "audit dead latents before scaling the dictionary"}], "focus_items": []},
        "reflection", "supervisor")
    (issue,) = memory.normalize(ws, refl)

    # stale headline number caught, validated against a fresh table next iteration
    w.to(10, "writing")
    evidence.register_claim(ws, "c-stale", "Speedup is large", maturity="PilotSignal", role="methodologist")
    canon = {"values": {"ratio": 2.7}}
    t10 = art(10, "experiment/results.json", canon, "result-table", "experimenter", canonical=True)
    d10 = {"numbers": [{"name": "ratio", "value": 4.1, "claim": "c-stale"}]}
    d10_id = art(10, "writing/draft.json", d10, "draft", "writer")
    (f_stale,) = decide("quality-gate", gates.detect_stale_numbers(d10, canon, draft_id=d10_id, canonical_id=t10))
    w.to(11, "planning")
    orchestrator.mutate_plan(ws, [{"op": "add", "task": {
        "id": "dead-latent-audit", "question": "Audit dead latents", "kind": "validation"}}],
        [memory.overlay_id("planner", issue.id)])
    expected.append({"case": "lesson overlay changes plan", "signal": issue.id, "signal_iteration": 8,
                     "update_iteration": 11, "kind": "behavior", "functions": ["H1", "H4"]})
    t11 = art(11, "planning/results-recomputed.json", canon, "result-table", "experimenter")
    evidence.attach_edges(ws, "c-stale", [(t11, "validates")], role="methodologist", cause_refs=[f_stale])
    expected.append({"case": "stale number", "signal": f_stale, "signal_iteration": 10, "update_iteration": 11,
                     "kind": "behavior", "functions": ["H2", "H3"]})

    # manifest disagrees with the claimed configuration
    w.to(13, "writing")
    evidence.register_claim(ws, "c-wd", "Sparse features recover the circuit", maturity="PilotSignal",
                            role="methodologist")
    man = art(13, "experiment/manifest.json", {"config": {"features": 1024}}, "run-manifest", "experimenter")
    d13 = art(13, "writing/draft.json", {"config_claims": {"features": 16384}}, "draft", "writer")
    (f_wd,) = decide("quality-gate", gates.detect_manifest_mismatch({"features": 16384},
                                                                     {"config": {"features": 1024}},
                                                                     draft_id=d13, manifest_id=man))
    w.to(14, "planning")
    orchestrator.mutate_plan(ws, [{"op": "add", "task": {
        "id": "wd-rerun", "question": "Rerun with the claimed feature count", "kind": "experiment"}}], [f_wd])
    rawlog = art(14, "planning/run-log.json", {"features": 1024}, "run-log", "experimenter")
    evidence.attach_edges(ws, "c-wd", [(rawlog, "raw-log"), (rawlog, "contradicts")], role="critic",
                          cause_refs=[f_wd])
    expected.append({"case": "manifest mismatch", "signal": f_wd, "signal_iteration": 13, "update_iteration": 14,
                     "kind": "behavior", "functions": ["H1", "H2", "H3"]})
    orchestrator.finish(ws)
    ws.close()
    for e in expected:
        e["latency"] = e["update_iteration"] - e["signal_iteration"]
    expected.sort(key=lambda e: (e["update_iteration"], e["signal"]))
    return {"events": expected, "count": 8, "median_latency": 1, "max_latency": 3,
            "latencies": sorted(e["latency"] for e in expected)}


# -- stage-transition fixture --------------------------------------------------------

TRANSITION_COUNTS = {
    ("writing", "writing"): 405,
    ("experiment", "experiment"): 271,
    ("review", "harness"): 217,
    ("harness", "experiment"): 124,
    ("harness", "review"): 109,
    ("writing", "review"): 90,
    ("harness", "validation"): 90,
    ("experiment", "validation"): 85,
    ("validation", "harness"): 85,
    ("validation", "experiment"): 78,
    ("review", "experiment"): 76,
}
# Unpublished cells sized so the graph has an Euler decomposition into 12 traces
# while staying below the smallest published count.
TRANSITION_FILLERS = {
    ("harness", "writing"): 16,
    ("experiment", "harness"): 31,
    ("experiment", "review"): 75,
    ("experiment", "writing"): 75,
    ("validation", "review"): 13,
    ("writing", "validation"): 1,
}
TRACE_STARTS = ("harness",) * 6 + ("review",) * 6
TRACE_END = "experiment"
GROUP_STAGE = {"harness": "planning", "experiment": "experiment", "validation": "validation", "review": "review",
               "writing": "writing"}


def euler_traces(counts: dict[tuple[str, str], int], starts: tuple[str, ...], end: str) -> list[list[str]]:
    """Split a multigraph into len(starts) walks, each from a start to ``end``."""
    adj: dict[str, list[tuple[str, bool]]] = defaultdict(list)
    for (a, b), n in sorted(counts.items()):
        adj[a].extend([(b, False)] * n)
    for s in starts:
        adj[end].append((s, True))
    total = sum(len(v) for v in adj.values())
    for v in adj.values():
        v.reverse()
    stack: list[tuple[str, bool]] = [(end, True)]
    circuit: list[tuple[str, bool]] = []
    while stack:
        node, virt = stack[-1]
        if adj[node]:
            stack.append(adj[node].pop())
        else:
            circuit.append(stack.pop())
    circuit.reverse()
    if len(circuit) - 1 != total:
        raise ValueError("transition counts are not an Euler decomposition")
    edges = circuit[1:]
    first = next(i for i, (_, virt) in enumerate(edges) if virt)
    traces: list[list[str]] = []
    for node, virt in edges[first:] + edges[:first]:
        if virt:
            traces.append([node])
        else:
            traces[-1].append(node)
    return traces


def build_transition_fixture(root: Path) -> dict[str, Any]:
    counts = {**TRANSITION_COUNTS, **TRANSITION_FILLERS}
    traces = euler_traces(counts, TRACE_STARTS, TRACE_END)
    root.mkdir(parents=True)
    stage_ends = 0
    for i, trace in enumerate(traces, 1):
        ws = _ws(root / f"trace-{i:02d}", name=f"trace-{i:02d}")
        it = 0
        stage = "ideation"
        if trace[0] != "harness":
            # resumed trace: the workspace was reopened at a later stage
            stage = GROUP_STAGE[trace[0]]
            ws.log("stage-start", iteration=it, stage=stage, payload={"resume": True})
        for group in trace[1:]:
            ws.log("stage-end", iteration=it, stage=stage)
            stage_ends += 1
            if group == "harness":
                it += 1
            stage = GROUP_STAGE[group]
            ws.log("stage-start", iteration=it, stage=stage)
        ws.log("stage-end", iteration=it, stage=stage)
        stage_ends += 1
        ws.close()
    return {
        "published": {f"{a}->{b}": n for (a, b), n in TRANSITION_COUNTS.items()},
        "fillers": {f"{a}->{b}": n for (a, b), n in TRANSITION_FILLERS.items()},
        "traces": len(traces),
        "stage_end_records": stage_ends,
        "transitions": sum(counts.values()),
    }


# -- review-to-action fixture ---------------------------------------------------------

REVIEW_DELTAS = {
    "down": [-0.5, -0.5, -1.0, -1.5, -0.5, -0.75, -1.0, -0.5, -1.2, -0.75],
    "flat": [0.0, 0.0, 0.25, -0.25, 0.0, 0.0],
    "up": [0.5, 0.5, 1.0, 0.5, 0.75, 0.5, 1.0, 0.5, 0.75, 1.0],
}
ROWS_PER_WORKSPACE = (5, 4, 4, 4, 3, 3, 3, 3, 3, 3, 2)
HIGH_SEVERITY_TOTALS = {"down": 87, "flat": 39, "up": 40, "no-prior": 42}
FOCUS_TOTALS = {"down": 84, "flat": 35, "up": 75, "no-prior": 65}
NEXT_PLANS = {
    "down": (7, {"experiment/control": 56, "validation/artifact": 17, "harness/system": 13, "claim/writing": 1,
                 "other": 1}),
    "flat": (5, {"experiment/control": 28, "validation/artifact": 12, "harness/system": 7, "claim/writing": 1,
                 "other": 0}),
    "up": (5, {"experiment/control": 31, "validation/artifact": 13, "harness/system": 9, "claim/writing": 1,
               "other": 1}),
    "no-prior": (8, {"experiment/control": 57, "validation/artifact": 10, "harness/system": 10,
                     "claim/writing": 1, "other": 1}),
}
TASK_TEMPLATES = {
    "experiment/control": ("experiment", "Rerun the ablation with matched seeds"),
    "validation/artifact": ("validation", "Recompute the table from stored logs"),
    "harness/system": ("harness", "Repair the stage resume path"),
    "claim/writing": ("writing", "Revise the limitations paragraph"),
    "other": ("note", "Collect reviewer notes"),
}


def spread(total: int, n: int) -> list[int]:
    base, extra = divmod(total, n)
    return [base + (1 if i < extra else 0) for i in range(n)]


def _delta_queue() -> list[tuple[str, float]]:
    queues = {m: list(v) for m, v in REVIEW_DELTAS.items()}
    out = []
    while any(queues.values()):
        for m in ("down", "up", "flat"):
            if queues[m]:
                out.append((m, queues[m].pop(0)))
    return out


def build_review_fixture(root: Path) -> dict[str, Any]:
    root.mkdir(parents=True)
    deltas = _delta_queue()
    rows: list[dict[str, Any]] = []
    for w, n in enumerate(ROWS_PER_WORKSPACE):
        score = 5.0
        for i in range(n):
            if i == 0:
                movement, delta = "no-prior", None
            else:
                movement, delta = deltas.pop(0)
                score = round(score + delta, 2)
            rows.append({"workspace": w, "iteration": i, "movement": movement, "score": score, "delta": delta})
    per_move: dict[str, list[dict[str, Any]]] = defaultdict(list)
    for r in rows:
        per_move[r["movement"]].append(r)
    for m, rs in per_move.items():
        for r, h in zip(rs, spread(HIGH_SEVERITY_TOTALS[m], len(rs))):
            r["high"] = h
        for r, f in zip(rs, spread(FOCUS_TOTALS[m], len(rs))):
            r["focus"] = f
        visible, mix = NEXT_PLANS[m]
        plans: list[list[str]] = [[] for _ in range(visible)]
        k = 0
        for cat, count in mix.items():
            for _ in range(count):
                plans[k % visible].append(cat)
                k += 1
        for j, r in enumerate(rs):
            r["plan"] = plans[j] if j < visible else None
    by_ws: dict[int, list[dict[str, Any]]] = defaultdict(list)
    for r in rows:
        by_ws[r["workspace"]].append(r)
    for w, rs in sorted(by_ws.items()):
        ws = _ws(root / f"ws-{w + 1:02d}", name=f"review-ws-{w + 1:02d}")
        for r in rs:
            it = r["iteration"]
            if it > 0:
                ws.log("stage-start", iteration=it, stage="planning")
            _plan_artifact(ws, it, rs[it - 1]["plan"] if it > 0 else None)
            ws.write_artifact(f"iterations/{it:04d}/review/review.json", {"score": r["score"]}, "review", "critic")
            issues = [{"category": "experiment", "failure_class": f"gap-{k}",
                       "severity": "critical" if k % 2 == 0 else "major"} for k in range(r["high"])]
            issues.append({"category": "writing", "failure_class": "wording", "severity": "minor"})
            ws.write_artifact(f"iterations/{it:04d}/reflection/reflection.json",
                              {"issues": issues, "focus_items": [f"focus {k}" for k in range(r["focus"])]},
                              "reflection", "supervisor")
        last = rs[-1]["iteration"] + 1
        if rs[-1]["plan"] is not None:
            ws.log("stage-start", iteration=last, stage="planning")
            _plan_artifact(ws, last, rs[-1]["plan"])
        ws.close()
    ws = _ws(root / "ws-12", name="review-ws-12")
    for it in range(2):
        if it:
            ws.log("stage-start", iteration=it, stage="planning")
        ws.write_artifact(f"iterations/{it:04d}/review/review.json", {"score": None, "verdict": "pending"},
                          "review", "critic")
        ws.write_artifact(f"iterations/{it:04d}/reflection/reflection.json",
                          {"issues": [{"category": "system", "failure_class": "x", "severity": "major"}],
                           "focus_items": ["unscored"]}, "reflection", "supervisor")
    ws.close()
    expected = {}
    for m in ("down", "flat", "up", "no-prior"):
        rs = per_move[m]
        ds = [r["delta"] for r in rs if r["delta"] is not None]
        expected[m] = {
            "rows": len(rs),
            "mean_delta": round(sum(ds) / len(ds), 9) if ds else None,
            "high_severity_total": HIGH_SEVERITY_TOTALS[m],
            "focus_total": FOCUS_TOTALS[m],
            "visible_next_plans": NEXT_PLANS[m][0],
            "task_mix": NEXT_PLANS[m][1],
        }
    published = {
        "down": {"rows": 10, "mean_delta": -0.82, "mean_high_severity": 8.7, "mean_focus_items": 8.4},
        "flat": {"rows": 6, "mean_delta": 0.00, "mean_high_severity": 6.5, "mean_focus_items": 5.8},
        "up": {"rows": 10, "mean_delta": 0.70, "mean_high_severity": 4.0, "mean_focus_items": 7.5},
        "no-prior": {"rows": 11, "mean_delta": None, "mean_high_severity": 3.8, "mean_focus_items": 5.9},
    }
    return {"constructed": expected, "published": published, "workspaces": len(by_ws) + 1}


def _plan_artifact(ws: Workspace, it: int, cats: list[str] | None) -> None:
    if cats is None:
        return
    tasks = []
    for k, cat in enumerate(cats):
        kind, question = TASK_TEMPLATES[cat]
        tasks.append({"id": f"t{it}-{k}", "kind": kind, "question": question})
    ws.write_artifact(f"iterations/{it:04d}/plan/next-plan.json", {"iteration": it, "tasks": tasks},
                      "action-plan", "planner")


# -- evolution digest stream ------------------------------------------------------------

DIGEST_COUNTS = {
    "experiment": 212,
    "writing": 89,
    "analysis": 84,
    "system": 20,
    "ideation": 4,
    "pipeline": 3,
    "planning": 3,
    "efficiency": 1,
}
DIGEST_SINGLETONS = 24


def digest_stream() -> dict[str, Any]:
    """Reflection documents whose issues recur into the published pattern counts."""
    patterns = []
    k = 0
    for cat in ISSUE_CATEGORIES:
        for j in range(DIGEST_COUNTS.get(cat, 0)):
            patterns.append((cat, f"{cat}-pattern-{j:03d}", 2 + (k % 3 == 0)))
            k += 1
    for j in range(DIGEST_SINGLETONS):
        cat = ISSUE_CATEGORIES[j % len(ISSUE_CATEGORIES)]
        patterns.append((cat, f"{cat}-one-off-{j:03d}", 1))
    reflections = []
    for it in range(3):
        issues = [
            {"category": cat, "failure_class": fc, "severity": "major" if n > 2 else "minor"}
            for cat, fc, n in patterns
            if it < n
        ]
        reflections.append({"iteration": it, "issues": issues, "focus_items": []})
    return {"reflections": reflections}


def ingest_digest(ws: Workspace, stream: dict[str, Any]) -> None:
    for doc in stream["reflections"]:
        it = doc["iteration"]
        if ws.iteration < it:
            ws.log("stage-start", iteration=it, stage="reflection")
        art = ws.write_artifact(f"iterations/{it:04d}/reflection/reflection.json",
                                {"issues": doc["issues"], "focus_items": doc["focus_items"]},
                                "reflection", "supervisor")
        memory.normalize(ws, art.id)


# -- entry point ---------------------------------------------------------------------------


def build_fixtures(out_dir: str | Path) -> list[FixtureManifest]:
    out = Path(out_dir)
    if out.exists():
        raise WorkspaceError(f"refusing to overwrite existing output directory {out}")
    out.mkdir(parents=True)
    manifests: list[FixtureManifest] = []

    scen_dir = out / "scenarios"
    scen_dir.mkdir()
    files = []
    for name, data in all_scenarios().items():
        p = scen_dir / f"{name}.json"
        p.write_text(dump_pretty(data), encoding="utf-8")
        files.append(str(p.relative_to(out)))
    manifests.append(FixtureManifest(
        "scenarios", "constructed", "scenario files checked by their own expected_outcomes", files,
        {"scenarios": sorted(all_scenarios())},
    ))

    exp = build_conversion_fixture(out / "conversion-events")
    manifests.append(FixtureManifest(
        "conversion-events", "published-table",
        "published conversion-event table: eight signal-to-update rows and their latency column",
        ["conversion-events"], exp,
    ))

    from harness.scenario import run_scenario

    rep = run_scenario(scenario("five-class"), out / "recovered-failures",
                       sidecar=out / "recovered-failures.injections.jsonl")
    manifests.append(FixtureManifest(
        "recovered-failures", "published-table",
        "published recovered-failure registry: five failure classes with catch and later update",
        ["recovered-failures", "recovered-failures.injections.jsonl", "scenarios/five-class.json"],
        {"critical_findings": len(rep.critical_findings), "classes": [c for _, c, _ in FIVE_CLASSES],
         "converted_rows": 5},
    ))

    manifests.append(FixtureManifest(
        "stage-transitions", "published-table",
        "published raw stage-transition counts: 1853 stage-end records across 12 traces",
        ["stage-transitions"], build_transition_fixture(out / "stage-transitions"),
    ))

    manifests.append(FixtureManifest(
        "review-action", "published-table",
        "published review-to-action table: 37 parseable rows bucketed at a 0.25-point threshold",
        ["review-action"], build_review_fixture(out / "review-action"),
    ))

    stream = digest_stream()
    (out / "digest").mkdir()
    (out / "digest" / "stream.json").write_text(dump_pretty(stream), encoding="utf-8")
    manifests.append(FixtureManifest(
        "evolution-digest", "published-table",
        "published evolution digest: 416 recurring issue patterns by category",
        ["digest/stream.json"], {"counts": DIGEST_COUNTS, "total": sum(DIGEST_COUNTS.values()),
                                 "singletons": DIGEST_SINGLETONS},
    ))

    (out / "manifest.json").write_text(dump_pretty([m.to_dict() for m in manifests]), encoding="utf-8")
    return manifests


def load_manifests(out_dir: str | Path) -> dict[str, dict[str, Any]]:
    data = json.loads((Path(out_dir) / "manifest.json").read_text(encoding="utf-8"))
    return {m["name"]: m for m in data}
