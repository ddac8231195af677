"""Read-only forensic pass over workspace traces.

Linking is purely citation based: an update event is connected to a signal
only through the ids its refs cite, possibly via gate decisions and lesson
overlays in between. Nothing here writes to the workspace.
"""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from typing import Any, Iterable, Sequence

from harness.config import AUDIT_GROUPS, STAGE_GROUPS
from harness.store import EventRecord, Workspace, id_number

SIGNAL_COLLECTIONS = {"findings", "issues", "objections", "spends"}
HOP_COLLECTIONS = {"gates", "overlays"}
SIGNAL_OPS = {"issues": {"create", "recur"}, "objections": {"raise"}}
PLAN_OPS = {"add", "remove", "reorder", "rescale"}
HARNESS_UPDATE_OPS = {"apply", "register-sanity-check"}
MOVEMENTS = ("down", "flat", "up", "no-prior")
TASK_MIX = ("experiment/control", "validation/artifact", "harness/system", "claim/writing", "other")
HIGH_SEVERITY = {"critical", "major"}
FLAT_THRESHOLD = 0.25

TASK_CATEGORY_KINDS = {
    "experiment": "experiment/control",
    "control": "experiment/control",
    "baseline": "experiment/control",
    "ablation": "experiment/control",
    "pilot": "experiment/control",
    "run": "experiment/control",
    "validation": "validation/artifact",
    "artifact": "validation/artifact",
    "check": "validation/artifact",
    "audit": "validation/artifact",
    "verification": "validation/artifact",
    "harness": "harness/system",
    "system": "harness/system",
    "infra": "harness/system",
    "pipeline": "harness/system",
    "scheduler": "harness/system",
    "claim": "claim/writing",
    "writing": "claim/writing",
    "paper": "claim/writing",
    "draft": "claim/writing",
}


def task_category(task: dict[str, Any]) -> str:
    kind = str(task.get("kind", "")).lower()
    if kind in TASK_CATEGORY_KINDS:
        return TASK_CATEGORY_KINDS[kind]
    words = str(task.get("question", "")).lower().replace("-", " ").split()
    for w in words:
        if w in TASK_CATEGORY_KINDS:
            return TASK_CATEGORY_KINDS[w]
    return "other"


def lower_median(values: Sequence[int]) -> int | None:
    if not values:
        return None
    s = sorted(values)
    return s[(len(s) - 1) // 2]


@dataclass
class ConversionEvent:
    kind: str
    signal_ref: tuple[str, int]
    trace_path: list[str]
    update_ref: tuple[str, int]
    latency: int
    harness_functions: list[str]
    updates: list[str] = field(default_factory=list)
    signal_kind: str = ""

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["signal_ref"] = {"id": self.signal_ref[0], "iteration": self.signal_ref[1]}
        d["update_ref"] = {"id": self.update_ref[0], "iteration": self.update_ref[1]}
        return d


@dataclass
class ConversionReport:
    events: list[ConversionEvent]
    broken: list[dict[str, Any]]

    @property
    def count(self) -> int:
        return len(self.events)

    @property
    def latencies(self) -> list[int]:
        return [e.latency for e in self.events]

    @property
    def median_latency(self) -> int | None:
        return lower_median(self.latencies)

    @property
    def max_latency(self) -> int | None:
        return max(self.latencies) if self.events else None

    def summary(self) -> dict[str, Any]:
        return {
            "count": self.count,
            "median_latency": self.median_latency,
            "max_latency": self.max_latency,
            "behavior": sum(1 for e in self.events if e.kind == "behavior"),
            "harness": sum(1 for e in self.events if e.kind == "harness"),
            "broken_traces": len(self.broken),
        }


class _Index:
    """Who-wrote-what over one event log, built once per audit."""

    def __init__(self, ws: Workspace):
        self.ws = ws
        self.events = ws.events()
        self.collection_of: dict[str, str] = {}
        self.owner_events: dict[str, list[EventRecord]] = defaultdict(list)
        self.records: dict[str, dict[str, Any]] = {}
        for e in self.events:
            for r in e.payload.get("records", []):
                self.collection_of[r["id"]] = r["collection"]
                self.owner_events[r["id"]].append(e)
                self.records[r["id"]] = r["data"]

    def collection(self, ref: str) -> str | None:
        if ref.startswith("evt-"):
            return "events" if self.ws.event(ref) else None
        if ref in self.collection_of:
            return self.collection_of[ref]
        if self.ws.artifact(ref) is not None:
            return "artifacts"
        found = self.ws.resolve(ref)
        return found[0] if found else None

    def latest_owner(self, ref: str, before_seq: int, ops: set[str] | None = None) -> EventRecord | None:
        best = None
        for e in self.owner_events.get(ref, ()):
            if e.seq >= before_seq:
                break
            if ops is not None and e.payload.get("op") not in ops:
                continue
            best = e
        return best

    def is_signal(self, ref: str, collection: str) -> bool:
        if collection not in SIGNAL_COLLECTIONS:
            return False
        if collection == "spends":
            return self.records.get(ref, {}).get("outcome") in ("wasteful", "failed")
        return True


def update_functions(event: EventRecord) -> set[str] | None:
    """Harness functions an event exercises if it is an update, else None."""
    p = event.payload
    if event.kind == "task-update" and p.get("op") in PLAN_OPS:
        return {"H1"}
    if event.kind == "claim-update" and p.get("op") != "register":
        return {"H2", "H3"} if p.get("edges") else {"H2"}
    if event.kind == "rollback" and not p.get("noop"):
        return {"H7"}
    if event.kind == "harness-update" and p.get("op") in HARNESS_UPDATE_OPS:
        return {"H6", "H7"} if p.get("op") == "register-sanity-check" else {"H7"}
    return None


def _own_ids(event: EventRecord) -> set[str]:
    return {r["id"] for r in event.payload.get("records", [])}


def extract_conversions(ws: Workspace) -> ConversionReport:
    idx = _Index(ws)
    grouped: dict[tuple[str, int], ConversionEvent] = {}
    broken: list[dict[str, Any]] = []
    for ev in idx.events:
        funcs = update_functions(ev)
        if funcs is None:
            continue
        own = _own_ids(ev)
        refs = [r for r in ev.refs if r not in own]
        bad = [r for r in refs if idx.collection(r) is None]
        if bad:
            broken.append({"update": ev.id, "unresolved": bad})
            continue
        found = _walk(idx, refs, ev.seq)
        for signal, path, hop_funcs, signal_kind in found:
            occ = idx.latest_owner(signal, ev.seq, SIGNAL_OPS.get(idx.collection_of.get(signal, ""), None))
            if occ is None:
                broken.append({"update": ev.id, "unresolved": [signal]})
                continue
            key = (signal, ev.iteration)
            tags = set(funcs) | hop_funcs
            if signal_kind == "objections":
                tags.add("H5")
            if signal_kind == "spends":
                tags.add("H6")
            is_harness = ev.kind == "harness-update"
            if key not in grouped:
                grouped[key] = ConversionEvent(
                    kind="harness" if is_harness else "behavior",
                    signal_ref=(signal, occ.iteration),
                    trace_path=[*path, ev.id],
                    update_ref=(ev.id, ev.iteration),
                    latency=ev.iteration - occ.iteration,
                    harness_functions=sorted(tags, key=lambda h: int(h[1:])),
                    updates=[ev.id],
                    signal_kind=signal_kind,
                )
            else:
                ce = grouped[key]
                ce.updates.append(ev.id)
                merged = set(ce.harness_functions) | tags
                ce.harness_functions = sorted(merged, key=lambda h: int(h[1:]))
                if is_harness:
                    ce.kind = "harness"
    events = sorted(grouped.values(), key=lambda c: (id_number(c.update_ref[0]), c.signal_ref[0]))
    return ConversionReport(events=events, broken=broken)


def _walk(idx: _Index, refs: Iterable[str], before_seq: int) -> list[tuple[str, list[str], set[str], str]]:
    """Breadth-first walk from an update's refs back to signals."""
    out = []
    seen: set[str] = set()
    frontier = [(r, [r], set()) for r in refs]
    while frontier:
        nxt = []
        for ref, path, funcs in frontier:
            if ref in seen:
                continue
            seen.add(ref)
            col = idx.collection(ref)
            if col is None:
                continue
            if idx.is_signal(ref, col):
                out.append((ref, list(reversed(path)), funcs, col))
                continue
            if col in HOP_COLLECTIONS:
                owner = idx.latest_owner(ref, before_seq)
                if owner is None:
                    continue
                hop_funcs = funcs | ({"H2"} if col == "gates" else {"H4"})
                for r in owner.refs:
                    if r != ref:
                        nxt.append((r, [*path, r], hop_funcs))
            elif col == "events":
                e = idx.ws.event(ref)
                if e is not None and e.seq < before_seq:
                    hop_funcs = funcs | ({"H2"} if e.kind == "gate-decision" else set())
                    for r in e.refs:
                        nxt.append((r, [*path, r], hop_funcs))
        frontier = nxt
    return out


# -- stage transitions ------------------------------------------------------


def transition_pairs(events: Iterable[EventRecord]) -> list[tuple[str, str]]:
    pairs = []
    pending: EventRecord | None = None
    for e in events:
        if e.kind == "stage-end":
            pending = e
        elif e.kind == "stage-start" and pending is not None:
            pairs.append((pending.stage, e.stage))
            pending = None
    return pairs


def transition_matrix(workspaces: Workspace | Sequence[Workspace], groups: dict[str, str] | None = None) -> dict[tuple[str, str], int]:
    if isinstance(workspaces, Workspace):
        workspaces = [workspaces]
    counts: Counter[tuple[str, str]] = Counter()
    for ws in workspaces:
        g = groups or ws.config().get("stage_groups", STAGE_GROUPS)
        for a, b in transition_pairs(ws.events()):
            counts[(g[a], g[b])] += 1
    return dict(counts)


def format_matrix(counts: dict[tuple[str, str], int]) -> str:
    width = max(len(g) for g in AUDIT_GROUPS) + 2
    lines = ["from \\ to".ljust(width) + "".join(g.rjust(width) for g in AUDIT_GROUPS)]
    for a in AUDIT_GROUPS:
        lines.append(a.ljust(width) + "".join(str(counts.get((a, b), 0)).rjust(width) for b in AUDIT_GROUPS))
    return "\n".join(lines)


# -- review to action --------------------------------------------------------


@dataclass
class ReviewActionRow:
    workspace: str
    iteration: int
    score: float | None
    delta: float | None
    movement: str
    high_severity_issue_count: int
    focus_item_count: int
    next_plan_visible: bool
    next_plan_task_mix: dict[str, int]

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def classify_movement(delta: float | None) -> str:
    if delta is None:
        return "no-prior"
    d = round(delta, 9)
    if abs(d) <= FLAT_THRESHOLD:
        return "flat"
    return "down" if d < 0 else "up"


def review_rows(ws: Workspace) -> list[ReviewActionRow]:
    rows = []
    prior: float | None = None
    name = ws.manifest.get("name", ws.root.name)
    iterations = sorted({a.iteration for a in ws.artifacts(kind="reflection")})
    for it in iterations:
        reflection = ws.latest(it, "reflection")
        review = ws.latest(it, "review")
        score = None
        if review is not None:
            s = ws.read_artifact_json(review).get("score")
            if isinstance(s, (int, float)) and not isinstance(s, bool):
                score = float(s)
        if score is None:
            continue
        content = ws.read_artifact_json(reflection)
        delta = None if prior is None else round(score - prior, 9)
        high = sum(1 for i in content.get("issues", []) if i.get("severity") in HIGH_SEVERITY)
        plan = ws.latest(it + 1, "action-plan")
        mix = {c: 0 for c in TASK_MIX}
        if plan is not None:
            for t in ws.read_artifact_json(plan).get("tasks", []):
                mix[task_category(t)] += 1
        rows.append(
            ReviewActionRow(
                workspace=name,
                iteration=it,
                score=score,
                delta=delta,
                movement=classify_movement(delta),
                high_severity_issue_count=high,
                focus_item_count=len(content.get("focus_items", [])),
                next_plan_visible=plan is not None,
                next_plan_task_mix=mix,
            )
        )
        prior = score
    return rows


def review_to_action(workspaces: Workspace | Sequence[Workspace]) -> tuple[list[ReviewActionRow], dict[str, dict[str, Any]]]:
    if isinstance(workspaces, Workspace):
        workspaces = [workspaces]
    rows = [r for ws in workspaces for r in review_rows(ws)]
    agg: dict[str, dict[str, Any]] = {}
    for m in MOVEMENTS:
        sel = [r for r in rows if r.movement == m]
        n = len(sel)
        deltas = [r.delta for r in sel if r.delta is not None]
        mix = {c: sum(r.next_plan_task_mix[c] for r in sel) for c in TASK_MIX}
        agg[m] = {
            "rows": n,
            "mean_delta": round(sum(deltas) / len(deltas), 9) if deltas else None,
            "mean_high_severity": round(sum(r.high_severity_issue_count for r in sel) / n, 9) if n else None,
            "mean_focus_items": round(sum(r.focus_item_count for r in sel) / n, 9) if n else None,
            "visible_next_plans": sum(1 for r in sel if r.next_plan_visible),
            "next_plan_tasks": sum(mix.values()),
            "task_mix": mix,
        }
    return rows, agg


def format_review_table(agg: dict[str, dict[str, Any]]) -> str:
    lines = [f"{'movement':<9} {'rows':>4} {'mean Δ':>7} {'high-sev':>8} {'focus':>6} {'plans':>5} {'tasks':>5}  mix"]
    for m in MOVEMENTS:
        a = agg[m]
        delta = "--" if a["mean_delta"] is None else f"{a['mean_delta']:+.2f}"
        hs = "--" if a["mean_high_severity"] is None else f"{a['mean_high_severity']:.1f}"
        fo = "--" if a["mean_focus_items"] is None else f"{a['mean_focus_items']:.1f}"
        mix = ", ".join(f"{v} {k}" for k, v in a["task_mix"].items() if v)
        lines.append(f"{m:<9} {a['rows']:>4} {delta:>7} {hs:>8} {fo:>6} {a['visible_next_plans']:>5} "
                     f"{a['next_plan_tasks']:>5}  {mix}")
    return "\n".join(lines)


# -- recovered-failure registry ------------------------------------------------


@dataclass
class FailureRow:
    finding_id: str
    failure_class: str
    validator_id: str
    iteration: int
    signal: list[str]
    catch: str
    later_update: list[str]
    converted: bool

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def failure_registry(ws: Workspace, report: ConversionReport | None = None) -> list[FailureRow]:
    report = report or extract_conversions(ws)
    by_signal: dict[str, list[ConversionEvent]] = defaultdict(list)
    for ce in report.events:
        by_signal[ce.signal_ref[0]].append(ce)
    gate_of: dict[str, str] = {}
    for rec in ws.list_records("gates"):
        for fid in rec.get("findings", []):
            gate_of[fid] = f"{rec['gate_id']} {rec['outcome']} ({rec['id']})"
    rows = []
    for rec in sorted(ws.list_records("findings"), key=lambda r: id_number(r["id"])):
        if rec["severity"] != "critical":
            continue
        conv = by_signal.get(rec["id"], [])
        rows.append(
            FailureRow(
                finding_id=rec["id"],
                failure_class=rec["failure_class"],
                validator_id=rec["validator_id"],
                iteration=rec.get("iteration", 0),
                signal=rec["offending_artifacts"],
                catch=gate_of.get(rec["id"], "unlogged"),
                later_update=[u for ce in conv for u in ce.updates],
                converted=bool(conv),
            )
        )
    return rows


def format_conversions(report: ConversionReport) -> str:
    lines = [f"{'signal':<18} {'t':>3} {'update':<10} {'t+k':>4} {'k':>2} {'kind':<8} functions"]
    for e in report.events:
        lines.append(
            f"{e.signal_ref[0]:<18} {e.signal_ref[1]:>3} {e.update_ref[0]:<10} {e.update_ref[1]:>4} "
            f"{e.latency:>2} {e.kind:<8} {','.join(e.harness_functions)}"
        )
    s = report.summary()
    lines.append(
        f"events={s['count']} median_latency={s['median_latency']} max_latency={s['max_latency']} "
        f"broken_traces={s['broken_traces']}"
    )
    return "\n".join(lines)


def format_failures(rows: Sequence[FailureRow]) -> str:
    lines = [f"{'finding':<10} {'class':<24} {'iter':>4} {'catch':<34} {'status':<11} update"]
    for r in rows:
        status = "converted" if r.converted else "unconverted"
        lines.append(f"{r.finding_id:<10} {r.failure_class:<24} {r.iteration:>4} {r.catch:<34} {status:<11} "
                     f"{','.join(r.later_update) or '-'}")
    return "\n".join(lines)
