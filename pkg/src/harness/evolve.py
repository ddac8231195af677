"""Recurrence-triggered harness updates under protected constraints.

Every applied update snapshots the raw config bytes first, so rolling it
back restores the file exactly.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from typing import Any, Iterable

from harness import memory, orchestrator
from harness.store import Workspace, WorkspaceError, id_number

UPDATE_KINDS = (
    "gate",
    "prompt-overlay",
    "telemetry-requirement",
    "scheduler-policy",
    "repair-task",
    "artifact-contract",
)
WEAKENING_OPS = {"disable-validator", "remove-guard", "set-rule", "set-authority", "edit-protected"}

REPAIR_QUESTIONS = {
    "duplicate-results": "Single-source re-analysis with duplicate detection over replicate files",
    "ci-inversion": "Recompute confidence intervals from source data and check containment",
    "stale-number": "Source-to-draft validation of every headline number",
    "manifest-mismatch": "Verify run manifest against claimed configuration before claim generation",
    "unsupported-statistic": "Trace each reported statistic to a stored source value",
    "missing-output": "Re-run the task and re-register its declared outputs",
    "pilot-boundary": "Run the full-scale follow-up needed before the claim is generalized",
}


class ProtectedConstraintError(WorkspaceError):
    def __init__(self, update: "HarnessUpdate", constraint: dict[str, Any]):
        super().__init__(f"update {update.id} rejected: protected constraint {constraint['id']} ({constraint['rule']})")
        self.update = update
        self.constraint = constraint


@dataclass
class HarnessUpdate:
    id: str
    kind: str
    trigger_issues: list[str]
    payload: dict[str, Any]
    protected_check: str = "passed"
    applied_at: int | None = None
    status: str = "proposed"
    approved: bool = False

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "HarnessUpdate":
        return cls(**{k: copy.deepcopy(data[k]) for k in cls.__dataclass_fields__ if k in data})


def updates(ws: Workspace) -> list[HarnessUpdate]:
    recs = ws.list_records("harness-updates")
    return sorted((HarnessUpdate.from_dict(r) for r in recs), key=lambda u: id_number(u.id))


def _would_change(cfg: dict[str, Any], payload: dict[str, Any]) -> bool:
    trial = apply_op(copy.deepcopy(cfg), payload)
    return trial != cfg


def evaluate_recurrence(ws: Workspace, issue_list: Iterable[memory.IssueRecord] | None = None) -> list[HarnessUpdate]:
    """Propose one update per recurring issue not already acted on. Nothing is written."""
    cfg = ws.config()
    evo = cfg["evolution"]
    threshold = int(evo.get("threshold", 2))
    cited = {iid for u in updates(ws) if u.status in ("applied", "rolled-back") for iid in u.trigger_issues}
    proposals = []
    pool = list(issue_list) if issue_list is not None else memory.issues(ws)
    for issue in sorted(pool, key=lambda i: id_number(i.id)):
        if issue.frequency < threshold or issue.id in cited:
            continue
        spec = evo["mapping"].get(issue.failure_class)
        if spec is None:
            spec = {
                **evo.get("fallback", {"kind": "prompt-overlay", "op": "add-overlay"}),
                "lesson": issue.suggested_action or issue.failure_class,
                "roles": cfg["routing"][issue.category],
                "failure_class": issue.failure_class,
            }
        payload = {k: v for k, v in spec.items() if k != "kind"}
        if not _would_change(cfg, payload):
            continue
        proposals.append(
            HarnessUpdate(id="", kind=spec["kind"], trigger_issues=[issue.id], payload=payload)
        )
    return proposals


def apply_op(cfg: dict[str, Any], payload: dict[str, Any]) -> dict[str, Any]:
    op = payload["op"]
    if op == "enable-validator":
        vals = cfg.setdefault("gates", {}).setdefault(payload["gate"], {}).setdefault("validators", [])
        if payload["validator"] not in vals:
            vals.append(payload["validator"])
    elif op == "disable-validator":
        vals = cfg.get("gates", {}).get(payload["gate"], {}).get("validators", [])
        if payload["validator"] in vals:
            vals.remove(payload["validator"])
    elif op == "set-rule":
        cfg.setdefault("gate_rules", {}).setdefault(payload["validator"], dict(cfg["gate_rules"]["default"]))[
            payload["severity"]
        ] = payload["outcome"]
    elif op == "add-guard":
        cfg.setdefault("guards", {})[payload["edge"]] = payload["guard"]
    elif op == "remove-guard":
        cfg.get("guards", {}).pop(payload["edge"], None)
    elif op == "set-scheduler":
        cfg.setdefault("scheduler", {})[payload["key"]] = payload["value"]
    elif op == "require-telemetry":
        req = cfg.setdefault("telemetry_requirements", [])
        if payload["field"] not in req:
            req.append(payload["field"])
    elif op == "add-overlay":
        rules = cfg.setdefault("prompt_overlays", [])
        entry = {"failure_class": payload.get("failure_class"), "lesson": payload.get("lesson"),
                 "roles": payload.get("roles", [])}
        if entry not in rules:
            rules.append(entry)
    elif op == "set-routing":
        cfg.setdefault("routing", {})[payload["category"]] = list(payload["roles"])
    elif op == "set-authority":
        cfg["authority"][payload["role"]][payload["action"]] = bool(payload["value"])
    elif op == "repair-task":
        pass
    else:
        raise ValueError(f"unknown update op {op!r}")
    return cfg


def protected_constraints(ws: Workspace) -> list[dict[str, Any]]:
    path = ws.root / "registry" / "protected.conf"
    return json.loads(path.read_text(encoding="utf-8")).get("constraints", [])


_SEVERITY_RANK = {"allow": 0, "downgrade": 1, "block": 2}


def _violated(cfg: dict[str, Any], payload: dict[str, Any], constraint: dict[str, Any]) -> bool:
    """Does applying ``payload`` weaken or delete what ``constraint`` protects?"""
    protects = constraint["protects"]
    op = payload["op"]
    kind, _, target = protects.partition(":")
    if kind == "validator":
        gate, _, validator = target.partition(":")
        return op == "disable-validator" and payload.get("gate") == gate and payload.get("validator") == validator
    if kind == "guard":
        return op == "remove-guard" and payload.get("edge") == target
    if kind == "config":
        if target == "gate_rules" and op == "set-rule":
            table = cfg.get("gate_rules", {})
            current = table.get(payload["validator"], table.get("default", {})).get(payload["severity"], "block")
            return _SEVERITY_RANK[payload["outcome"]] < _SEVERITY_RANK[current]
        if target == "authority":
            return op == "set-authority"
        return op == "set-config" and payload.get("key") == target
    if kind == "file":
        return op == "edit-protected" and target == "registry/protected.conf"
    return False


def protected_check(ws: Workspace, update: HarnessUpdate) -> tuple[str, dict[str, Any] | None]:
    cfg = ws.config()
    for c in protected_constraints(ws):
        if _violated(cfg, update.payload, c):
            return "requires-approval", c
    return "passed", None


def apply_update(ws: Workspace, update: HarnessUpdate | dict[str, Any], approval: bool = False) -> HarnessUpdate:
    if isinstance(update, dict):
        update = HarnessUpdate.from_dict(update)
    if update.kind not in UPDATE_KINDS:
        raise ValueError(f"unknown update kind {update.kind!r}")
    if not update.trigger_issues:
        raise ValueError("a harness update must cite at least one trigger issue")
    if not update.id:
        update.id = ws.new_id("upd", "harness-updates")
    check, constraint = protected_check(ws, update)
    if check == "requires-approval" and not approval:
        update.protected_check = "rejected"
        update.status = "rejected"
        ws.commit(
            "harness-update",
            [("harness-updates", update.id, update.to_dict())],
            refs=[update.id, *update.trigger_issues],
            payload={"op": "reject", "constraint": constraint["id"], "update_op": update.payload["op"]},
        )
        raise ProtectedConstraintError(update, constraint)
    update.protected_check = check
    update.approved = approval
    snapshot = ws.root / "registry" / "harness-updates" / "snapshots" / f"{update.id}.config.json"
    snapshot.parent.mkdir(parents=True, exist_ok=True)
    snapshot.write_bytes(ws.config_path.read_bytes())
    cfg = apply_op(ws.config(), update.payload)
    if update.payload["op"] == "edit-protected":
        _edit_protected(ws, update.payload)
    update.status = "applied"
    update.applied_at = ws.tail_seq + 1
    ws.commit(
        "harness-update",
        [("harness-updates", update.id, update.to_dict())],
        refs=[update.id, *update.trigger_issues],
        payload={"op": "apply", "kind": update.kind, "update_op": update.payload["op"], "approved": approval},
        config=cfg,
    )
    return update


def _edit_protected(ws: Workspace, payload: dict[str, Any]) -> None:
    path = ws.root / "registry" / "protected.conf"
    data = json.loads(path.read_text(encoding="utf-8"))
    data["constraints"] = payload["constraints"]
    ws._atomic_write(path, json.dumps(data, sort_keys=True, indent=2) + "\n")


def rollback_update(ws: Workspace, update_id: str) -> HarnessUpdate:
    rec = ws.get_record("harness-updates", update_id)
    if rec is None or rec.get("status") != "applied":
        raise WorkspaceError(f"{update_id} is not an applied update")
    snapshot = ws.root / "registry" / "harness-updates" / "snapshots" / f"{update_id}.config.json"
    raw = snapshot.read_bytes()
    update = HarnessUpdate.from_dict(rec)
    update.status = "rolled-back"
    ws._atomic_write(ws.config_path, raw.decode("utf-8"))
    ws.commit(
        "harness-update",
        [("harness-updates", update.id, update.to_dict())],
        refs=[update.id],
        payload={"op": "rollback", "config": json.loads(raw)},
    )
    return update


def evolve(ws: Workspace, approval: bool = False) -> list[HarnessUpdate]:
    """Propose and apply in one step; protected rejections are skipped."""
    applied = []
    for proposal in evaluate_recurrence(ws):
        try:
            applied.append(apply_update(ws, proposal, approval))
        except ProtectedConstraintError:
            continue
    return applied


def generate_repair_task(
    ws: Workspace, finding: dict[str, Any] | Any, *, addresses: Iterable[str] | None = None
) -> orchestrator.TaskRecord | None:
    """Add a repair task to the current plan ahead of pending writing tasks."""
    f = finding.to_dict() if hasattr(finding, "to_dict") else dict(finding)
    if f.get("recommended_action") != "repair-task":
        return None
    task_id = f"repair-{f['id']}"
    if ws.get_record("tasks", task_id) is not None:
        return orchestrator.get_task(ws, task_id)
    if addresses is None:
        keys = {memory.normalize_failure_class(f["validator_id"]), memory.normalize_failure_class(f["failure_class"])}
        addresses = [i.id for i in memory.issues(ws) if i.failure_class in keys and i.status != "addressed"]
    writing = [
        t.id
        for t in orchestrator.plan(ws)
        if t.kind in ("writing", "claim") and t.status not in orchestrator.TERMINAL
    ]
    task = {
        "id": task_id,
        "question": REPAIR_QUESTIONS.get(f["validator_id"], f"Repair {f['failure_class']}"),
        "expected_evidence": f"no {f['failure_class']} finding on re-run",
        "kind": "validation",
        "family": f["validator_id"],
        "outputs": [],
        "budget_units": 1.0,
        "addresses": list(addresses),
        "cites": [f["id"]],
    }
    mutation: dict[str, Any] = {"op": "add", "task": task}
    if writing:
        mutation["before"] = writing
    tasks = orchestrator.mutate_plan(ws, [mutation], [f["id"]], role="scheduler")
    return next(t for t in tasks if t.id == task_id)
