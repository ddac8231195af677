"""Claim registry, evidence-maturity ladder and claim-evidence trace graph."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from enum import IntEnum
from typing import Any, Iterable, Sequence

from harness import roles
from harness.store import Workspace, WorkspaceError


class MaturityLevel(IntEnum):
    ExecutionComplete = 0
    PilotSignal = 1
    AnalysisReady = 2
    PaperReady = 3
    AuditedClaim = 4

    @classmethod
    def parse(cls, value: "str | int | MaturityLevel") -> "MaturityLevel":
        if isinstance(value, MaturityLevel):
            return value
        if isinstance(value, int):
            return cls(value)
        try:
            return cls[value]
        except KeyError:
            raise ClaimError(f"unknown maturity level {value!r}") from None


EDGE_KINDS = ("supports", "validates", "contradicts", "config", "raw-log", "negative-result")
NEGATIVE_KINDS = ("contradicts", "negative-result")
USAGE_REQUIREMENT = {
    "pilot-mention": MaturityLevel.PilotSignal,
    "general-claim": MaturityLevel.PaperReady,
    "headline": MaturityLevel.AuditedClaim,
}
VALIDATION_STATUSES = ("unvalidated", "passed", "failed")


class ClaimError(WorkspaceError):
    pass


@dataclass
class EvidenceEdge:
    claim_id: str
    artifact_id: str
    edge_kind: str
    seq: int = -1

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class ClaimRecord:
    id: str
    statement: str
    maturity: str = MaturityLevel.ExecutionComplete.name
    scope_label: str = ""
    validation_status: str = "unvalidated"
    evidence_edges: list[dict[str, Any]] = field(default_factory=list)
    negative_edges: list[dict[str, Any]] = field(default_factory=list)
    headline_numbers: list[dict[str, Any]] = field(default_factory=list)
    promotion_requirements: dict[str, Any] | None = None
    tolerance: float | None = None

    @property
    def level(self) -> MaturityLevel:
        return MaturityLevel.parse(self.maturity)

    @property
    def edges(self) -> list[dict[str, Any]]:
        return sorted([*self.evidence_edges, *self.negative_edges], key=lambda e: e["seq"])

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ClaimRecord":
        return cls(**{k: copy.deepcopy(data[k]) for k in cls.__dataclass_fields__ if k in data})


@dataclass
class GateOutcome:
    outcome: str  # allow | downgrade | block
    level: MaturityLevel | None = None
    reason: str = ""
    text: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "outcome": self.outcome,
            "level": self.level.name if self.level is not None else None,
            "reason": self.reason,
            "text": self.text,
        }


# -- pure rule table ---------------------------------------------------------
# An edge for evaluation is (edge_kind, artifact_kind or None if dangling, seq).

EdgeView = tuple[str, "str | None", int]


def unresolved_contradictions(edges: Sequence[EdgeView]) -> list[EdgeView]:
    return [
        e
        for e in edges
        if e[0] == "contradicts" and not any(v[0] == "validates" and v[2] > e[2] for v in edges)
    ]


def effective_maturity(recorded: MaturityLevel, edges: Sequence[EdgeView], validation_status: str) -> MaturityLevel:
    level = recorded
    table_support = any(k == "supports" and ak == "result-table" for k, ak, _ in edges)
    if level >= MaturityLevel.AnalysisReady and not (table_support and validation_status == "passed"):
        level = MaturityLevel.PilotSignal
    if level >= MaturityLevel.PaperReady and unresolved_contradictions(edges):
        level = MaturityLevel.AnalysisReady
    return level


def evaluate_claim(
    recorded: MaturityLevel,
    edges: Sequence[EdgeView],
    validation_status: str,
    usage: str,
    *,
    statement: str = "",
    scope_label: str = "",
) -> GateOutcome:
    if usage not in USAGE_REQUIREMENT:
        raise ClaimError(f"unknown usage {usage!r}")
    if any(ak is None for _, ak, _ in edges):
        return GateOutcome("block", reason="unresolvable evidence path")
    required = USAGE_REQUIREMENT[usage]
    if recorded < required:
        return GateOutcome("block", reason=f"maturity {recorded.name} below {required.name} required for {usage}")
    effective = effective_maturity(recorded, edges, validation_status)
    text = None
    if usage == "pilot-mention":
        text = f"{statement} ({scope_label})" if scope_label else statement
    if effective >= required:
        return GateOutcome("allow", level=recorded, text=text)
    if effective < MaturityLevel.PilotSignal:
        return GateOutcome("block", reason="evidence below pilot signal")
    return GateOutcome(
        "downgrade", level=effective, reason=f"evidence supports only {effective.name} for {usage}", text=text
    )


def invariant_holds(level: MaturityLevel, edges: Sequence[EdgeView], validation_status: str) -> bool:
    if any(ak is None for _, ak, _ in edges):
        return level <= MaturityLevel.PilotSignal
    return effective_maturity(level, edges, validation_status) == level


# -- registry operations ------------------------------------------------------


def get_claim(ws: Workspace, claim_id: str) -> ClaimRecord:
    rec = ws.get_record("claims", claim_id)
    if rec is None:
        raise ClaimError(f"unknown claim {claim_id!r}")
    return ClaimRecord.from_dict(rec)


def claims(ws: Workspace) -> list[ClaimRecord]:
    return [ClaimRecord.from_dict(r) for r in ws.list_records("claims")]


def edge_views(ws: Workspace, claim: ClaimRecord, extra: Iterable[dict[str, Any]] = ()) -> list[EdgeView]:
    out: list[EdgeView] = []
    for e in [*claim.edges, *extra]:
        art = ws.artifact(e["artifact_id"])
        out.append((e["edge_kind"], art.kind if art else None, e["seq"]))
    return out


def check_claim(ws: Workspace, claim: ClaimRecord | str, usage: str) -> GateOutcome:
    if isinstance(claim, str):
        claim = get_claim(ws, claim)
    return evaluate_claim(
        claim.level,
        edge_views(ws, claim),
        claim.validation_status,
        usage,
        statement=claim.statement,
        scope_label=claim.scope_label,
    )


def _save(
    ws: Workspace, claim: ClaimRecord, op: str, refs: Iterable[str], payload: dict[str, Any] | None = None
) -> ClaimRecord:
    body = {"op": op, "claim_id": claim.id, "maturity": claim.maturity, **(payload or {})}
    ws.commit("claim-update", [("claims", claim.id, claim.to_dict())], refs=[claim.id, *refs], payload=body)
    return claim


def _new_edges(ws: Workspace, claim_id: str, edges: Iterable[Any]) -> list[dict[str, Any]]:
    seq = ws.tail_seq + 1
    out = []
    for e in edges:
        if isinstance(e, dict):
            artifact_id, kind = e["artifact_id"], e["edge_kind"]
        else:
            artifact_id, kind = e
        if kind not in EDGE_KINDS:
            raise ClaimError(f"unknown edge kind {kind!r}")
        if ws.artifact(artifact_id) is None:
            raise ClaimError(f"edge target {artifact_id!r} does not resolve")
        out.append(EvidenceEdge(claim_id, artifact_id, kind, seq).to_dict())
    return out


def _add_edges(claim: ClaimRecord, edges: list[dict[str, Any]]) -> None:
    for e in edges:
        (claim.negative_edges if e["edge_kind"] in NEGATIVE_KINDS else claim.evidence_edges).append(e)


def register_claim(
    ws: Workspace,
    claim_id: str,
    statement: str,
    *,
    maturity: str | MaturityLevel = MaturityLevel.ExecutionComplete,
    scope_label: str = "",
    headline_numbers: list[dict[str, Any]] | None = None,
    promotion_requirements: dict[str, Any] | None = None,
    tolerance: float | None = None,
    role: str = "system",
    refs: Iterable[str] = (),
) -> ClaimRecord:
    roles.require(ws, role, "emit-artifact")
    if ws.get_record("claims", claim_id) is not None:
        raise ClaimError(f"claim {claim_id!r} already registered")
    level = MaturityLevel.parse(maturity)
    if level > MaturityLevel.PilotSignal:
        raise ClaimError("new claims start at PilotSignal or below; promote to go higher")
    claim = ClaimRecord(
        id=claim_id,
        statement=statement,
        maturity=level.name,
        scope_label=scope_label,
        headline_numbers=list(headline_numbers or []),
        promotion_requirements=promotion_requirements,
        tolerance=tolerance,
    )
    return _save(ws, claim, "register", refs, {"role": role})


def _settle(ws: Workspace, claim: ClaimRecord) -> MaturityLevel | None:
    """Demote ``claim`` in place until its level's invariant holds."""
    views = edge_views(ws, claim)
    before = claim.level
    level = effective_maturity(before, views, claim.validation_status)
    if any(ak is None for _, ak, _ in views):
        level = min(level, MaturityLevel.PilotSignal)
    if level < before:
        claim.maturity = level.name
        return before
    return None


def attach_edges(
    ws: Workspace,
    claim_id: str,
    edges: Iterable[Any],
    *,
    role: str = "system",
    cause_refs: Iterable[str] = (),
) -> ClaimRecord:
    roles.require(ws, role, "emit-artifact")
    claim = get_claim(ws, claim_id)
    new = _new_edges(ws, claim_id, edges)
    _add_edges(claim, new)
    demoted_from = _settle(ws, claim)
    payload: dict[str, Any] = {"edges": new, "role": role}
    if demoted_from is not None:
        payload["demoted_from"] = demoted_from.name
    refs = [*cause_refs, *(e["artifact_id"] for e in new)]
    return _save(ws, claim, "attach", refs, payload)


def record_validation(
    ws: Workspace, claim_id: str, passed: bool, *, refs: Iterable[str] = (), role: str = "system"
) -> ClaimRecord:
    claim = get_claim(ws, claim_id)
    claim.validation_status = "passed" if passed else "failed"
    demoted_from = _settle(ws, claim)
    payload: dict[str, Any] = {"validation_status": claim.validation_status, "role": role}
    if demoted_from is not None:
        payload["demoted_from"] = demoted_from.name
    return _save(ws, claim, "validate", refs, payload)


def _requirements_met(ws: Workspace, claim: ClaimRecord, extra: list[dict[str, Any]]) -> str | None:
    req = claim.promotion_requirements
    if not req:
        return None
    min_n = req.get("min_n")
    min_seeds = req.get("min_seeds")
    for e in [*claim.edges, *extra]:
        if e["edge_kind"] not in ("supports", "config"):
            continue
        art = ws.artifact(e["artifact_id"])
        if art is None or art.kind != "run-manifest":
            continue
        cfg = ws.read_artifact_json(art).get("config", {})
        n_ok = min_n is None or float(cfg.get("n", 0)) >= float(min_n)
        seeds = cfg.get("seeds", [])
        seeds_count = len(seeds) if isinstance(seeds, list) else int(seeds)
        s_ok = min_seeds is None or seeds_count >= int(min_seeds)
        if n_ok and s_ok:
            return None
    return f"needs a run-manifest edge with n >= {min_n} and >= {min_seeds} seeds"


def promote(
    ws: Workspace,
    claim_id: str,
    to: str | MaturityLevel,
    evidence: Iterable[Any] = (),
    *,
    role: str = "system",
    refs: Iterable[str] = (),
) -> ClaimRecord:
    roles.require(ws, role, "promote-claim")
    claim = get_claim(ws, claim_id)
    target = MaturityLevel.parse(to)
    if target != claim.level + 1:
        raise ClaimError(f"promotion must move exactly one level: {claim.level.name} -> {target.name}")
    new = _new_edges(ws, claim_id, evidence)
    views = edge_views(ws, claim, new)
    if target >= MaturityLevel.AnalysisReady and claim.validation_status != "passed":
        raise ClaimError(f"promotion to {target.name} requires passed validation")
    if not invariant_holds(target, views, claim.validation_status):
        raise ClaimError(f"evidence does not satisfy the {target.name} invariant")
    req = claim.promotion_requirements or {}
    if req and target >= MaturityLevel.parse(req.get("level", "AnalysisReady")):
        problem = _requirements_met(ws, claim, new)
        if problem:
            raise ClaimError(f"promotion of {claim_id} rejected: {problem}")
    _add_edges(claim, new)
    claim.maturity = target.name
    return _save(ws, claim, "promote", [*refs, *(e["artifact_id"] for e in new)], {"edges": new, "role": role})


def demote(
    ws: Workspace,
    claim_id: str,
    to: str | MaturityLevel | None = None,
    *,
    cause_refs: Iterable[str] = (),
    role: str = "system",
) -> ClaimRecord:
    roles.require(ws, role, "downgrade-claim")
    claim = get_claim(ws, claim_id)
    target = MaturityLevel(max(claim.level - 1, 0)) if to is None else MaturityLevel.parse(to)
    if target > claim.level:
        raise ClaimError("demotion cannot raise maturity")
    before = claim.maturity
    claim.maturity = target.name
    return _save(ws, claim, "demote", cause_refs, {"demoted_from": before, "role": role})


def restrict(
    ws: Workspace, claim_id: str, scope_label: str, *, cause_refs: Iterable[str] = (), role: str = "system"
) -> ClaimRecord:
    """Attach a scope boundary (e.g. "pilot estimate") to a claim."""
    roles.require(ws, role, "downgrade-claim")
    claim = get_claim(ws, claim_id)
    claim.scope_label = scope_label
    return _save(ws, claim, "restrict", cause_refs, {"scope_label": scope_label, "role": role})


@dataclass
class TraceStep:
    seq: int
    ref: str
    relation: str
    rel_path: str | None = None
    artifact_kind: str | None = None
    via: str | None = None
    superseded_by: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def trace(ws: Workspace, claim_id: str) -> list[TraceStep]:
    """Every edge, validation and lineage artifact reachable from a claim, by seq."""
    claim = get_claim(ws, claim_id)
    edges = claim.edges
    steps: list[TraceStep] = []
    seen: set[str] = set()
    for e in edges:
        art = ws.artifact(e["artifact_id"])
        step = TraceStep(
            seq=e["seq"],
            ref=e["artifact_id"],
            relation=e["edge_kind"],
            rel_path=art.rel_path if art else None,
            artifact_kind=art.kind if art else None,
        )
        if e["edge_kind"] == "contradicts":
            later = [v for v in edges if v["edge_kind"] == "validates" and v["seq"] > e["seq"]]
            if later:
                step.superseded_by = later[0]["artifact_id"]
        steps.append(step)
        seen.add(e["artifact_id"])
    frontier = [e["artifact_id"] for e in edges]
    while frontier:
        nxt = []
        for aid in frontier:
            art = ws.artifact(aid)
            if art is None:
                continue
            for src in art.sources:
                if src in seen:
                    continue
                seen.add(src)
                sa = ws.artifact(src)
                steps.append(
                    TraceStep(
                        seq=sa.created_seq if sa else -1,
                        ref=src,
                        relation="lineage",
                        rel_path=sa.rel_path if sa else None,
                        artifact_kind=sa.kind if sa else None,
                        via=aid,
                    )
                )
                nxt.append(src)
        frontier = nxt
    for ev in ws.events("claim-update"):
        if ev.payload.get("claim_id") == claim_id and ev.payload.get("op") == "validate":
            steps.append(TraceStep(seq=ev.seq, ref=ev.id, relation=f"validation:{ev.payload['validation_status']}"))
    relation_rank = {"lineage": 0}
    steps.sort(key=lambda s: (s.seq, relation_rank.get(s.relation, 1), s.ref))
    return steps


def writer_boundary_violations(ws: Workspace) -> list[tuple[str, str]]:
    """(draft id, claim id) pairs where a draft headline cites a claim below AuditedClaim."""
    bad = []
    for art in ws.artifacts(kind="draft"):
        content = ws.read_artifact_json(art)
        for cid in content.get("headline_refs", []):
            rec = ws.get_record("claims", cid)
            if rec is None or MaturityLevel.parse(rec["maturity"]) < MaturityLevel.AuditedClaim:
                bad.append((art.id, cid))
    return bad
