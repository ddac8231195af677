"""Role identities, the authority matrix, objections and scripted agents.

Roles are data: an :class:`AgentScript` lists, per (iteration, stage), what
the role emits. An external process can stand in for a script through
:class:`ExternalAdapter`.
"""

from __future__ import annotations

import json
import os
import shutil
import subprocess
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable

from harness.config import ACTIONS, ROLES
from harness.store import Workspace, WorkspaceError

SEVERITY_RANK = {"minor": 0, "major": 1, "critical": 2}
DEMANDED_ACTIONS = ("validation-task", "plan-mutation", "stop-branch", "claim-downgrade")
RAW_NUMBER_KINDS = {"result-table", "run-manifest", "run-log"}


class AuthorityError(WorkspaceError):
    def __init__(self, role: str, action: str, detail: str = ""):
        rule = f"authority rule ({role}, {action}) = deny"
        super().__init__(f"{rule}{': ' + detail if detail else ''}")
        self.role = role
        self.action = action


class ObjectionError(WorkspaceError):
    pass


class ScriptError(WorkspaceError):
    pass


def authority_matrix(ws: Workspace) -> dict[str, dict[str, bool]]:
    return ws.config()["authority"]


def is_allowed(ws: Workspace, role: str, action: str) -> bool:
    if role == "system":
        return True
    if role not in ROLES:
        raise AuthorityError(role, action, "unknown role")
    if action not in ACTIONS:
        raise AuthorityError(role, action, "unknown action")
    return bool(authority_matrix(ws).get(role, {}).get(action, False))


def require(ws: Workspace, role: str, action: str, detail: str = "") -> None:
    if not is_allowed(ws, role, action):
        raise AuthorityError(role, action, detail)


def check_emission(ws: Workspace, role: str, kind: str, content: Any) -> None:
    """Apply the authority matrix to an artifact a role wants to emit."""
    require(ws, role, "emit-artifact")
    if role == "system":
        return
    if kind in RAW_NUMBER_KINDS:
        require(ws, role, "emit-raw-number", f"{kind} artifacts carry raw numbers")
    if kind == "draft" and isinstance(content, dict) and not is_allowed(ws, role, "emit-raw-number"):
        for section in ("numbers", "statistics"):
            for entry in content.get(section, []):
                if not entry.get("claim"):
                    raise AuthorityError(
                        role, "emit-raw-number", f"draft {section} entry {entry.get('name')!r} cites no claim id"
                    )


# -- objections -----------------------------------------------------------


@dataclass
class Objection:
    id: str
    raised_by: str
    target: str
    severity: str
    demanded_action: str
    iteration: int
    text: str = ""
    refs: list[str] = field(default_factory=list)
    resolution: str | None = None
    status: str = "open"

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Objection":
        return cls(**{k: data[k] for k in cls.__dataclass_fields__ if k in data})


def raise_objection(
    ws: Workspace,
    raised_by: str,
    target: str,
    severity: str,
    demanded_action: str,
    *,
    text: str = "",
    refs: Iterable[str] = (),
) -> Objection:
    require(ws, raised_by, "raise-objection")
    if severity not in SEVERITY_RANK:
        raise ObjectionError(f"unknown severity {severity!r}")
    if demanded_action not in DEMANDED_ACTIONS:
        raise ObjectionError(f"unknown demanded action {demanded_action!r}")
    obj = Objection(
        id=ws.new_id("obj", "objections"),
        raised_by=raised_by,
        target=target,
        severity=severity,
        demanded_action=demanded_action,
        iteration=ws.iteration,
        text=text,
        refs=list(refs),
    )
    ws.commit(
        "objection",
        [("objections", obj.id, obj.to_dict())],
        refs=[obj.id, target, *obj.refs],
        payload={"op": "raise", "severity": severity, "demanded_action": demanded_action},
    )
    return obj


def _cites(ws: Workspace, via: str, objection_id: str) -> bool:
    found = ws.resolve(via)
    if found is None:
        return False
    collection, rec = found
    if collection == "events":
        return objection_id in rec.refs
    if collection == "artifacts":
        return objection_id in rec.sources or objection_id in rec.meta.get("cites", [])
    if collection == "claims":
        return any(
            e.kind == "claim-update" and via in e.refs and objection_id in e.refs for e in ws.events("claim-update")
        )
    return objection_id in rec.get("cites", []) or objection_id in rec.get("refs", [])


def resolve_objection(ws: Workspace, objection_id: str, via: str, *, role: str = "system") -> Objection:
    rec = ws.get_record("objections", objection_id)
    if rec is None:
        raise ObjectionError(f"unknown objection {objection_id!r}")
    obj = Objection.from_dict(rec)
    if obj.status == "resolved":
        return obj
    if not via or ws.resolve(via) is None:
        raise ObjectionError(f"objection {objection_id}: resolution {via!r} does not exist")
    if not _cites(ws, via, objection_id):
        raise ObjectionError(f"objection {objection_id}: resolution {via!r} does not cite the objection")
    obj.resolution = via
    obj.status = "resolved"
    ws.commit(
        "objection",
        [("objections", obj.id, obj.to_dict())],
        refs=[obj.id, via],
        payload={"op": "resolve", "role": role},
    )
    return obj


def objections(ws: Workspace) -> list[Objection]:
    return [Objection.from_dict(r) for r in ws.list_records("objections")]


def open_objections(ws: Workspace, iteration: int | None = None, min_severity: str = "major") -> list[Objection]:
    floor = SEVERITY_RANK[min_severity]
    return [
        o
        for o in objections(ws)
        if o.status == "open"
        and SEVERITY_RANK[o.severity] >= floor
        and (iteration is None or o.iteration <= iteration)
    ]


# -- scripted agents ------------------------------------------------------

ENTRY_KEYS = {
    "iteration",
    "stage",
    "artifacts",
    "objections",
    "plan",
    "claims",
    "spends",
    "tasks",
    "resolve",
    "scoped_allow",
    "note",
}


@dataclass
class AgentScript:
    role: str
    entries: list[dict[str, Any]] = field(default_factory=list)
    on_overlay: list[dict[str, Any]] = field(default_factory=list)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "AgentScript":
        script = cls(role=data["role"], entries=list(data.get("entries", [])), on_overlay=list(data.get("on_overlay", [])))
        script.validate()
        return script

    def validate(self) -> None:
        if self.role not in ROLES:
            raise ScriptError(f"unknown role {self.role!r}")
        for i, entry in enumerate(self.entries):
            extra = set(entry) - ENTRY_KEYS
            if extra:
                raise ScriptError(f"{self.role} entry {i}: unknown keys {sorted(extra)}")
            if "stage" not in entry or "iteration" not in entry:
                raise ScriptError(f"{self.role} entry {i}: needs iteration and stage")
        for i, rule in enumerate(self.on_overlay):
            if "match" not in rule or "stage" not in rule:
                raise ScriptError(f"{self.role} on_overlay rule {i}: needs match and stage")

    def entries_for(self, iteration: int, stage: str) -> list[dict[str, Any]]:
        out = []
        for entry in self.entries:
            if entry["stage"] != stage:
                continue
            it = entry["iteration"]
            if it == "*" or it == iteration or (isinstance(it, list) and iteration in it):
                out.append(entry)
        return out

    def to_dict(self) -> dict[str, Any]:
        return {"role": self.role, "entries": self.entries, "on_overlay": self.on_overlay}


def render(value: Any, iteration: int, attempt: int = 0) -> Any:
    """Substitute ``{iteration}``, ``{iteration4}``, ``{prev}`` and ``{attempt}`` in strings."""
    if isinstance(value, str):
        return (
            value.replace("{iteration4}", f"{iteration:04d}")
            .replace("{iteration}", str(iteration))
            .replace("{prev}", str(iteration - 1))
            .replace("{attempt}", str(attempt))
        )
    if isinstance(value, list):
        return [render(v, iteration, attempt) for v in value]
    if isinstance(value, dict):
        return {k: render(v, iteration, attempt) for k, v in value.items()}
    return value


def attempt_path(rel_path: str, attempt: int) -> str:
    if attempt <= 0:
        return rel_path
    p = Path(rel_path)
    return str(p.with_name(f"{p.stem}.attempt{attempt}{p.suffix}"))


class Names:
    """Symbolic ``@name`` bindings to ids created during a run."""

    def __init__(self) -> None:
        self.bindings: dict[str, str] = {}

    def bind(self, name: str, ref: str) -> None:
        self.bindings[name] = ref

    def resolve(self, value: Any) -> Any:
        if isinstance(value, str) and value.startswith("@"):
            if value not in self.bindings:
                raise ScriptError(f"unbound symbolic reference {value}")
            return self.bindings[value]
        if isinstance(value, list):
            return [self.resolve(v) for v in value]
        if isinstance(value, dict):
            return {k: self.resolve(v) for k, v in value.items()}
        return value


@dataclass
class Emission:
    role: str
    stage: str
    iteration: int
    artifacts: list[str] = field(default_factory=list)
    objections: list[str] = field(default_factory=list)
    tasks: list[str] = field(default_factory=list)
    claims: list[str] = field(default_factory=list)
    spends: list[str] = field(default_factory=list)
    violations: list[str] = field(default_factory=list)


def invoke_role(
    ws: Workspace,
    role: str,
    stage: str,
    script: AgentScript,
    names: Names | None = None,
    *,
    strict: bool = True,
) -> Emission:
    """Run every script entry for the current (iteration, stage).

    Authority violations raise unless ``strict`` is False, in which case the
    offending action is skipped and reported in ``Emission.violations``.
    """
    names = names or Names()
    it = ws.iteration
    attempt = ws.attempt(it)
    out = Emission(role=role, stage=stage, iteration=it)
    for raw in script.entries_for(it, stage):
        entry = render(raw, it, attempt)
        try:
            _run_entry(ws, role, entry, names, out, attempt)
        except AuthorityError as exc:
            if strict:
                raise
            out.violations.append(str(exc))
    for rule in script.on_overlay:
        if rule["stage"] != stage:
            continue
        _run_overlay_rule(ws, role, render(rule, it, attempt), names, out)
    return out


def _run_entry(ws: Workspace, role: str, entry: dict[str, Any], names: Names, out: Emission, attempt: int) -> None:
    from harness import budget, evidence, orchestrator

    for spec in entry.get("artifacts", []):
        content = names.resolve(spec.get("content", {}))
        check_emission(ws, role, spec["kind"], content)
        rel = attempt_path(spec["path"], attempt)
        meta = names.resolve(spec.get("meta", {}))
        rec = ws.write_artifact(
            rel, content, spec["kind"], role, meta=meta, sources=names.resolve(spec.get("sources", []))
        )
        if spec.get("name"):
            names.bind(spec["name"], rec.id)
        out.artifacts.append(rec.id)
    for spec in entry.get("claims", []):
        spec = names.resolve(spec)
        op = spec["op"]
        cid = spec["claim"]
        if op == "register":
            if attempt and ws.get_record("claims", cid) is not None:
                # re-run after a rollback; the claim survives the earlier attempt
                continue
            evidence.register_claim(
                ws,
                cid,
                spec.get("statement", ""),
                maturity=spec.get("maturity", "ExecutionComplete"),
                scope_label=spec.get("scope_label", ""),
                headline_numbers=spec.get("headline_numbers", []),
                promotion_requirements=spec.get("promotion_requirements"),
                role=role,
            )
        elif op == "attach":
            evidence.attach_edges(ws, cid, spec["edges"], role=role, cause_refs=spec.get("cause", []))
        elif op == "validate":
            evidence.record_validation(ws, cid, spec.get("passed", True), refs=spec.get("refs", []), role=role)
        elif op == "promote":
            evidence.promote(ws, cid, spec["to"], spec.get("edges", []), role=role, refs=spec.get("refs", []))
        elif op == "demote":
            evidence.demote(ws, cid, spec.get("to"), cause_refs=spec.get("cause", []), role=role)
        else:
            raise ScriptError(f"unknown claim op {op!r}")
        out.claims.append(cid)
    for spec in entry.get("objections", []):
        spec = names.resolve(spec)
        obj = raise_objection(
            ws,
            role,
            spec["target"],
            spec.get("severity", "major"),
            spec.get("demanded_action", "validation-task"),
            text=spec.get("text", ""),
            refs=spec.get("refs", []),
        )
        if spec.get("name"):
            names.bind(spec["name"], obj.id)
        out.objections.append(obj.id)
    for spec in entry.get("plan", []):
        spec = names.resolve(spec)
        tasks = orchestrator.mutate_plan(ws, spec["mutations"], spec["cause"], role=role)
        out.tasks.extend(t.id for t in tasks)
    for spec in entry.get("tasks", []):
        spec = names.resolve(spec)
        orchestrator.update_task(ws, spec["task"], spec.get("status"), refs=spec.get("refs", []))
    for spec in entry.get("spends", []):
        spec = names.resolve(spec)
        ledger, _check = budget.record_outcome(
            ws, spec["task"], float(spec["units"]), spec.get("outcome", "useful"), role=role,
            telemetry=spec.get("telemetry"),
        )
        out.spends.append(ledger["spends"][-1]["id"])
    for spec in entry.get("resolve", []):
        spec = names.resolve(spec)
        resolve_objection(ws, spec["objection"], spec["via"], role=role)
    if "scoped_allow" in entry:
        spec = names.resolve(entry["scoped_allow"])
        require(ws, role, "scoped-allow")
        ws.log(
            "gate-decision",
            refs=spec.get("refs", []),
            payload={"gate_id": "scoped-allow", "outcome": "allow", "scope_risks": spec.get("risks", ""), "role": role},
        )


def _run_overlay_rule(ws: Workspace, role: str, rule: dict[str, Any], names: Names, out: Emission) -> None:
    from harness import memory, orchestrator

    for overlay in memory.overlays_for(ws, role, ws.iteration):
        if overlay.failure_class != rule["match"]:
            continue
        existing = {t.id for t in orchestrator.plan(ws)}
        mutations = []
        for m in rule.get("plan", []):
            m = names.resolve(m)
            if m.get("op") == "add" and m["task"]["id"] in existing:
                continue
            mutations.append(m)
        if mutations:
            tasks = orchestrator.mutate_plan(ws, mutations, [overlay.id], role=role)
            out.tasks.extend(t.id for t in tasks)


# -- external adapter ------------------------------------------------------


@dataclass
class ExternalAdapter:
    """Process-invocation contract for an agent outside the kernel.

    The command receives ``--workspace --stage --role --iteration --staging``
    plus ``--overlay`` paths. It writes artifact files under the staging dir
    and a ``manifest.json`` listing ``{"path", "kind", "meta"}`` entries.
    """

    role: str
    command: list[str]
    timeout: float = 300.0

    def invoke(self, ws: Workspace, stage: str) -> Emission:
        from harness import memory

        it = ws.iteration
        staging = ws.root / "staging" / f"{it:04d}-{stage}-{self.role}"
        if staging.exists():
            shutil.rmtree(staging)
        staging.mkdir(parents=True)
        overlay_paths = [str(memory.overlay_path(ws, o.id)) for o in memory.overlays_for(ws, self.role, it)]
        argv = [
            *self.command,
            "--workspace", str(ws.root),
            "--stage", stage,
            "--role", self.role,
            "--iteration", str(it),
            "--staging", str(staging),
        ]
        for p in overlay_paths:
            argv += ["--overlay", p]
        subprocess.run(argv, check=True, timeout=self.timeout, env={**os.environ})
        manifest = json.loads((staging / "manifest.json").read_text(encoding="utf-8"))
        out = Emission(role=self.role, stage=stage, iteration=it)
        dest = ws.iteration_dir(it) / "external" / self.role
        dest.mkdir(parents=True, exist_ok=True)
        for item in manifest.get("artifacts", []):
            src = staging / item["path"]
            if not src.resolve().is_relative_to(staging.resolve()):
                raise AuthorityError(self.role, "emit-artifact", f"{item['path']} escapes the staging dir")
            content = src.read_bytes()
            try:
                parsed = json.loads(content)
            except (json.JSONDecodeError, UnicodeDecodeError):
                parsed = None
            check_emission(ws, self.role, item["kind"], parsed)
            target = dest / Path(item["path"]).name
            target.write_bytes(content)
            rec = ws.register_artifact(target, item["kind"], self.role, it, meta=item.get("meta", {}))
            out.artifacts.append(rec.id)
        return out
