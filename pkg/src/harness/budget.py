"""Budget ledger, layered scheduling and wasteful-run sanity checks.

Units are dimensionless. Scheduling is a pure function of the plan, the
ledger and the registered sanity checks.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Any, Iterable, Sequence

from harness import roles
from harness.orchestrator import TERMINAL, PlanError, TaskRecord, get_task, plan, update_task
from harness.store import Workspace, WorkspaceError

OUTCOMES = ("useful", "wasteful", "failed")


class BudgetExceeded(WorkspaceError):
    pass


@dataclass
class SanityCheck:
    id: str
    guard_for: dict[str, Any]
    cost_units: float
    origin: str
    name: str = "sanity check"

    @property
    def node_id(self) -> str:
        return f"check:{self.id}"

    def guards(self, task: TaskRecord) -> bool:
        family = self.guard_for.get("family")
        scales = self.guard_for.get("scales")
        if family is not None and (task.family or task.kind) != family:
            return False
        if scales is not None and task.scale not in scales:
            return False
        return self.cost_units < task.budget_units

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "SanityCheck":
        return cls(**{k: data[k] for k in cls.__dataclass_fields__ if k in data})


@dataclass
class Schedule:
    layers: list[list[str]]
    deferred: dict[str, str] = field(default_factory=dict)
    checks: dict[str, list[str]] = field(default_factory=dict)  # check node -> guarded task ids

    def layer_of(self, node: str) -> int | None:
        for i, layer in enumerate(self.layers):
            if node in layer:
                return i
        return None

    def to_dict(self) -> dict[str, Any]:
        return {"layers": self.layers, "deferred": self.deferred, "checks": self.checks}


def ledger(ws: Workspace) -> dict[str, Any]:
    rec = ws.get_record("budget", "ledger")
    if rec:
        return rec
    total = float(ws.config().get("budget", {}).get("total_units", 0.0))
    return {"id": "ledger", "total_units": total, "spends": [], "sanity_checks": []}


def remaining(led: dict[str, Any]) -> float:
    return float(led["total_units"]) - sum(float(s["units"]) for s in led["spends"])


def sanity_checks(ws: Workspace) -> list[SanityCheck]:
    return [SanityCheck.from_dict(r) for r in ws.list_records("sanity-checks")]


def longest_path_layers(nodes: Sequence[str], deps: dict[str, set[str]]) -> dict[str, int]:
    depth: dict[str, int] = {}

    def visit(n: str, stack: tuple[str, ...] = ()) -> int:
        if n in depth:
            return depth[n]
        if n in stack:
            raise PlanError(f"dependency cycle through {n}")
        d = 0
        for p in deps.get(n, ()):
            d = max(d, visit(p, (*stack, n)) + 1)
        depth[n] = d
        return d

    for n in nodes:
        visit(n)
    return depth


def schedule(
    tasks: Sequence[TaskRecord],
    led: dict[str, Any],
    checks: Iterable[SanityCheck] = (),
) -> Schedule:
    order = [t.id for t in tasks]
    by_id = {t.id: t for t in tasks}
    deps: dict[str, set[str]] = {t.id: {d for d in t.dependencies if d in by_id} for t in tasks}
    cost: dict[str, float] = {t.id: float(t.budget_units) for t in tasks}
    guarded: dict[str, list[str]] = {}
    for check in checks:
        targets = [t.id for t in tasks if check.guards(t)]
        if not targets:
            continue
        node = check.node_id
        guarded[node] = targets
        deps[node] = set()
        cost[node] = float(check.cost_units)
        order.append(node)
        for t in targets:
            deps[t].add(node)
    depth = longest_path_layers(order, deps)
    pos = {n: i for i, n in enumerate(order)}
    ranked = sorted(order, key=lambda n: (depth[n], pos[n]))
    total = float(led["total_units"])
    left = remaining(led)
    deferred: dict[str, str] = {}
    committed = 0.0
    for node in ranked:
        blocked = sorted(d for d in deps[node] if d in deferred)
        if blocked:
            deferred[node] = f"dependency deferred: {', '.join(blocked)}"
        elif cost[node] > total:
            deferred[node] = f"budget {cost[node]:g} exceeds total {total:g}"
        elif committed + cost[node] > left:
            deferred[node] = f"budget {cost[node]:g} exceeds remaining {left - committed:g}"
        else:
            committed += cost[node]
    layers: list[list[str]] = []
    for node in ranked:
        if node in deferred:
            continue
        d = depth[node]
        while len(layers) <= d:
            layers.append([])
        layers[d].append(node)
    layers = [layer for layer in layers if layer]
    return Schedule(layers=layers, deferred=deferred, checks=guarded)


def schedule_workspace(ws: Workspace, iteration: int | None = None) -> Schedule:
    tasks = [t for t in plan(ws) if t.status not in TERMINAL and (iteration is None or t.iteration == iteration)]
    return schedule(tasks, ledger(ws), sanity_checks(ws))


def record_outcome(
    ws: Workspace,
    task_id: str,
    units: float,
    outcome: str,
    *,
    role: str = "system",
    telemetry: dict[str, Any] | None = None,
) -> tuple[dict[str, Any], SanityCheck | None]:
    roles.require(ws, role, "record-spend")
    if outcome not in OUTCOMES:
        raise ValueError(f"unknown outcome {outcome!r}")
    if units < 0:
        raise ValueError("negative spend")
    task = get_task(ws, task_id)
    led = ledger(ws)
    left = remaining(led)
    if units > left:
        update_task(ws, task_id, "failed")
        raise BudgetExceeded(f"spend {units:g} on {task_id} exceeds remaining budget {left:g}")
    spend = {
        "id": ws.new_id("spd", "spends"),
        "task_id": task_id,
        "units": float(units),
        "outcome": outcome,
        "iteration": ws.iteration,
        "telemetry": dict(telemetry or {}),
    }
    led = {**led, "spends": [*led["spends"], spend]}
    ws.commit(
        "budget-spend",
        [("spends", spend["id"], spend), ("budget", "ledger", led)],
        refs=[spend["id"], task_id],
        payload={"outcome": outcome, "units": float(units), "remaining": remaining(led)},
    )
    check = None
    if outcome == "wasteful" and task.proxy_check:
        check = _register_check(ws, task, spend)
        if check is not None:
            led = ledger(ws)
    return led, check


def _register_check(ws: Workspace, task: TaskRecord, spend: dict[str, Any]) -> SanityCheck | None:
    proxy = task.proxy_check or {}
    pattern = {"family": task.family or task.kind}
    for existing in sanity_checks(ws):
        if existing.guard_for == pattern:
            return None
    cost = float(proxy.get("cost", proxy.get("cost_units", 0)))
    check = SanityCheck(
        id=ws.new_id("san", "sanity-checks"),
        guard_for=pattern,
        cost_units=cost,
        origin=spend["id"],
        name=proxy.get("name", "sanity check"),
    )
    led = ledger(ws)
    led = {**led, "sanity_checks": [*led.get("sanity_checks", []), check.id]}
    ws.commit(
        "harness-update",
        [("sanity-checks", check.id, check.to_dict()), ("budget", "ledger", led)],
        refs=[check.id, spend["id"]],
        payload={"op": "register-sanity-check", "kind": "scheduler-policy", "cost_units": cost,
                 "guard_for": pattern},
    )
    return check


def format_schedule(s: Schedule) -> str:
    lines = []
    for i, layer in enumerate(s.layers):
        lines.append(f"layer {i}: {', '.join(layer)}")
    for node, reason in sorted(s.deferred.items()):
        lines.append(f"deferred {node}: {reason}")
    return "\n".join(lines)
