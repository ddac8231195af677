"""Iteration state machine and task plans.

Stage transitions follow the policy table in the workspace config. Guards
on a transition are evaluated by the gatekeeper; a blocked guard raises
:class:`BlockedTransition`. Plan mutations must cite what caused them.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from enum import Enum
from graphlib import CycleError, TopologicalSorter
from typing import Any, Iterable

from harness.config import STAGES
from harness.store import EventRecord, Workspace, WorkspaceError, dump_pretty


class TaskStatus(str, Enum):
    PENDING = "pending"
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"
    STOPPED = "stopped"


TERMINAL = {TaskStatus.COMPLETED.value, TaskStatus.FAILED.value, TaskStatus.STOPPED.value}


class TransitionError(WorkspaceError):
    pass


class BlockedTransition(TransitionError):
    def __init__(self, decision: Any):
        super().__init__(f"transition blocked by gate {decision.gate_id}: {decision.reason}")
        self.decision = decision


class PlanError(WorkspaceError):
    pass


@dataclass
class TaskRecord:
    id: str
    question: str
    expected_evidence: str = ""
    dependencies: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    stop_conditions: list[dict[str, Any]] = field(default_factory=list)
    scale: str = "full"
    status: str = TaskStatus.PENDING.value
    budget_units: float = 0.0
    kind: str = "experiment"
    family: str = ""
    proxy_check: dict[str, Any] | None = None
    cites: list[str] = field(default_factory=list)
    addresses: list[str] = field(default_factory=list)
    iteration: int = 0
    failures: int = 0
    stop_reason: str | None = None

    def __post_init__(self) -> None:
        if self.scale not in ("pilot", "full"):
            raise PlanError(f"task {self.id}: scale must be pilot or full")
        TaskStatus(self.status)
        if self.budget_units < 0:
            raise PlanError(f"task {self.id}: negative budget")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TaskRecord":
        return cls(**{k: copy.deepcopy(data[k]) for k in cls.__dataclass_fields__ if k in data})


@dataclass
class IterationState:
    iteration: int
    current_stage: str
    plan: list[TaskRecord]
    last_gate: dict[str, Any] | None


def stage_index(stage: str) -> int:
    return STAGES.index(stage)


def position_key(iteration: int, stage: str) -> tuple[int, int]:
    return iteration, stage_index(stage)


# -- stages --------------------------------------------------------------


def allowed_next(ws: Workspace) -> list[str]:
    return list(ws.config()["policy"].get(ws.stage, []))


def advance_stage(
    ws: Workspace,
    next_stage: str,
    *,
    refs: Iterable[str] = (),
    scope_risks: str | None = None,
) -> EventRecord:
    from harness import gates

    cfg = ws.config()
    it, cur = ws.position
    if next_stage not in cfg["stages"]:
        raise TransitionError(f"unknown stage {next_stage!r}")
    if next_stage not in cfg["policy"].get(cur, []):
        raise TransitionError(f"transition {cur} -> {next_stage} not permitted by the stage policy")
    edge = f"{cur}->{next_stage}"
    guard = cfg.get("guards", {}).get(edge)
    if guard:
        decision = gates.evaluate_guard(ws, guard, it)
        if decision is not None and decision.outcome == "block":
            raise BlockedTransition(decision)
    new_it = it + 1 if edge in cfg.get("iteration_boundaries", []) else it
    ws.log("stage-end", iteration=it, stage=cur)
    payload: dict[str, Any] = {}
    if scope_risks:
        payload["scope_risks"] = scope_risks
    return ws.log("stage-start", iteration=new_it, stage=next_stage, refs=refs, payload=payload)


def finish(ws: Workspace) -> EventRecord:
    """Close the open stage at the end of a run."""
    it, cur = ws.position
    return ws.log("stage-end", iteration=it, stage=cur)


def rollback(ws: Workspace, target_iteration: int, target_stage: str, cause: Any) -> EventRecord:
    outcome = cause.outcome if hasattr(cause, "outcome") else cause.get("outcome")
    cause_id = cause.id if hasattr(cause, "id") else cause.get("id")
    if outcome != "block":
        raise TransitionError("rollback requires a blocking gate decision")
    it, cur = ws.position
    target = position_key(target_iteration, target_stage)
    here = position_key(it, cur)
    if target > here:
        raise TransitionError(f"rollback target ({target_iteration}, {target_stage}) is later than ({it}, {cur})")
    refs = [cause_id] if cause_id else []
    payload: dict[str, Any] = {
        "target": {"iteration": target_iteration, "stage": target_stage},
        "from": {"iteration": it, "stage": cur},
    }
    if target == here:
        payload["noop"] = True
        return ws.log("rollback", iteration=it, stage=cur, refs=refs, payload=payload)
    ws.log("stage-end", iteration=it, stage=cur)
    payload["attempt"] = ws.attempt(target_iteration) + 1
    event = ws.log("rollback", iteration=it, stage=cur, refs=refs, payload=payload)
    ws.bump_attempt(target_iteration)
    ws.log("stage-start", iteration=target_iteration, stage=target_stage, refs=[event.id])
    return event


# -- plan ----------------------------------------------------------------


def plan_order(ws: Workspace) -> list[str]:
    rec = ws.get_record("plans", "current")
    return list(rec["order"]) if rec else []


def get_task(ws: Workspace, task_id: str) -> TaskRecord:
    rec = ws.get_record("tasks", task_id)
    if rec is None:
        raise PlanError(f"unknown task {task_id!r}")
    return TaskRecord.from_dict(rec)


def plan(ws: Workspace) -> list[TaskRecord]:
    return [get_task(ws, t) for t in plan_order(ws)]


def tasks_for_iteration(ws: Workspace, iteration: int) -> list[TaskRecord]:
    return [t for t in plan(ws) if t.iteration == iteration]


def _check_order(tasks: dict[str, TaskRecord], order: list[str]) -> None:
    graph = {tid: set(tasks[tid].dependencies) for tid in order}
    for tid, deps in graph.items():
        missing = deps - graph.keys()
        if missing:
            raise PlanError(f"task {tid} depends on tasks not in the plan: {sorted(missing)}")
    try:
        tuple(TopologicalSorter(graph).static_order())
    except CycleError as exc:
        raise PlanError(f"dependency cycle: {exc.args[1]}") from None


def is_topological(tasks: dict[str, TaskRecord], order: list[str]) -> bool:
    pos = {t: i for i, t in enumerate(order)}
    return all(pos[d] < pos[t] for t in order for d in tasks[t].dependencies)


def _stable_topo(tasks: dict[str, TaskRecord], order: list[str]) -> list[str]:
    pos = {t: i for i, t in enumerate(order)}
    ts = TopologicalSorter({t: set(tasks[t].dependencies) for t in order})
    ts.prepare()
    out: list[str] = []
    ready = sorted(ts.get_ready(), key=pos.__getitem__)
    while ready:
        node = ready.pop(0)
        out.append(node)
        ts.done(node)
        ready = sorted([*ready, *ts.get_ready()], key=pos.__getitem__)
    return out


def mutate_plan(
    ws: Workspace,
    mutations: list[dict[str, Any]] | dict[str, Any],
    cause_refs: Iterable[str],
    *,
    role: str = "planner",
) -> list[TaskRecord]:
    """Apply add/remove/reorder/rescale operations to the plan.

    Each operation becomes one task-update event citing ``cause_refs``.
    """
    from harness import gates, roles

    if isinstance(mutations, dict):
        mutations = [mutations]
    cause_refs = list(cause_refs)
    if not cause_refs:
        raise PlanError("unattributed mutation: cause_refs must cite at least one artifact")
    for ref in cause_refs:
        if not ws.has_id(ref):
            raise PlanError(f"cause ref {ref!r} does not resolve")
    roles.require(ws, role, "mutate-plan")
    it = ws.iteration
    order = plan_order(ws)
    tasks = {tid: get_task(ws, tid) for tid in order}
    touched: list[tuple[dict[str, Any], str]] = []
    for m in mutations:
        op = m.get("op")
        if op == "add":
            data = dict(m["task"])
            data.setdefault("iteration", it)
            data["cites"] = sorted(set(data.get("cites", [])) | set(cause_refs))
            task = TaskRecord.from_dict(data)
            if task.id in tasks or ws.get_record("tasks", task.id) is not None:
                raise PlanError(f"task id {task.id!r} already exists")
            tasks[task.id] = task
            before = m.get("before")
            if before:
                idx = min(order.index(b) for b in ([before] if isinstance(before, str) else before) if b in order)
                order.insert(idx, task.id)
            else:
                order.append(task.id)
            touched.append((m, task.id))
        elif op == "remove":
            tid = m["task_id"]
            if tid not in tasks:
                raise PlanError(f"cannot remove unknown task {tid!r}")
            dependents = [t for t in order if tid in tasks[t].dependencies]
            if dependents:
                raise PlanError(f"cannot remove {tid}: required by {dependents}")
            order.remove(tid)
            touched.append((m, tid))
        elif op == "reorder":
            new_order = list(m["order"])
            if sorted(new_order) != sorted(order):
                raise PlanError("reorder must be a permutation of the current plan")
            if not is_topological(tasks, new_order):
                raise PlanError("reorder violates task dependencies")
            order = new_order
            touched.append((m, ""))
        elif op == "rescale":
            tid = m["task_id"]
            task = tasks.get(tid)
            if task is None:
                raise PlanError(f"cannot rescale unknown task {tid!r}")
            if task.scale == "pilot" and m["scale"] == "full":
                if not gates.pilot_ready(ws, tid):
                    raise PlanError(f"task {tid}: pilot-to-full promotion needs a pilot-readiness gate allow")
            task.scale = m["scale"]
            if "budget_units" in m:
                task.budget_units = float(m["budget_units"])
            touched.append((m, tid))
        else:
            raise PlanError(f"unknown plan operation {op!r}")
    _check_order(tasks, order)
    if not is_topological(tasks, order):
        order = _stable_topo(tasks, order)
    for m, tid in touched:
        records: list[tuple[str, str, dict[str, Any]]] = []
        if tid and tid in tasks and m["op"] != "remove":
            records.append(("tasks", tid, tasks[tid].to_dict()))
        records.append(("plans", "current", {"id": "current", "order": order}))
        payload = {"op": m["op"], "task_id": tid or None, "role": role}
        refs = [*cause_refs, *([tid] if tid else [])]
        ws.commit("task-update", records, refs=refs, payload=payload)
    _snapshot_plan(ws, order, tasks, cause_refs, role)
    return [tasks[t] for t in order]


def _snapshot_plan(
    ws: Workspace, order: list[str], tasks: dict[str, TaskRecord], cause_refs: list[str], role: str
) -> None:
    it = ws.iteration
    path = ws.iteration_dir(it) / "plan" / f"plan-{ws.tail_seq:06d}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    content = {
        "iteration": it,
        "order": order,
        "tasks": [tasks[t].to_dict() for t in order if tasks[t].iteration == it],
        "cause_refs": cause_refs,
    }
    path.write_text(dump_pretty(content), encoding="utf-8")
    sources = [r for r in cause_refs if ws.artifact(r) is not None]
    producer = role if role != "scheduler" else "system"
    ws.register_artifact(path, "action-plan", producer, it, sources=sources)


def _pilot_blocked(ws: Workspace, task: TaskRecord) -> str | None:
    from harness import gates

    for dep in task.dependencies:
        d = get_task(ws, dep)
        if d.scale != "pilot":
            continue
        if d.status == TaskStatus.FAILED.value:
            return f"pilot dependency {dep} failed"
        latest = gates.latest_pilot_decision(ws, dep)
        if latest is not None and latest["outcome"] == "block":
            return f"pilot dependency {dep} marked not ready"
    return None


def spent_on(ws: Workspace, task_id: str) -> float:
    ledger = ws.get_record("budget", "ledger")
    if not ledger:
        return 0.0
    return sum(s["units"] for s in ledger.get("spends", []) if s["task_id"] == task_id)


def _stop_reason(ws: Workspace, task: TaskRecord) -> tuple[str, str] | None:
    for cond in task.stop_conditions:
        ctype = cond.get("type")
        if ctype == "max-budget" and spent_on(ws, task.id) >= float(cond["value"]):
            return TaskStatus.STOPPED.value, f"max-budget {cond['value']} reached"
        if ctype == "max-failures" and task.failures >= int(cond["value"]):
            return TaskStatus.STOPPED.value, f"max-failures {cond['value']} reached"
        if ctype == "evidence-threshold":
            kind = cond.get("kind", "result-table")
            n = sum(1 for a in ws.artifacts(kind=kind) if a.meta.get("task") == task.id)
            if n >= int(cond.get("count", 1)):
                return TaskStatus.COMPLETED.value, f"evidence threshold {n} {kind}"
    return None


def update_task(
    ws: Workspace,
    task_id: str,
    status: str | None = None,
    *,
    refs: Iterable[str] = (),
    failed_attempt: bool = False,
) -> TaskRecord:
    """Change a task's status; stop conditions are evaluated here."""
    task = get_task(ws, task_id)
    if status is not None:
        TaskStatus(status)
        if status == TaskStatus.RUNNING.value and task.scale == "full":
            reason = _pilot_blocked(ws, task)
            if reason:
                raise PlanError(f"task {task_id} cannot start: {reason}")
        task.status = status
    if failed_attempt:
        task.failures += 1
    if task.status not in TERMINAL:
        stop = _stop_reason(ws, task)
        if stop:
            task.status, task.stop_reason = stop
    ws.commit(
        "task-update",
        [("tasks", task.id, task.to_dict())],
        refs=[task.id, *refs],
        payload={"op": "status", "task_id": task.id, "status": task.status},
    )
    if task.status == TaskStatus.COMPLETED.value and task.addresses:
        from harness import memory

        memory.mark_addressed(ws, task.addresses, via=task.id)
    return task


def iteration_state(ws: Workspace) -> IterationState:
    from harness import gates

    it, stage = ws.position
    last = gates.latest_decision(ws)
    return IterationState(iteration=it, current_stage=stage, plan=plan(ws), last_gate=last)
