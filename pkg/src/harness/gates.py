"""Quality gates and the recovered-failure validators.

Validators are pure functions of artifact bytes and records. A gate runs
the validators named for it in the config, then aggregates findings into
an allow/downgrade/block decision through the rule table.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

from harness import evidence, roles
from harness.store import ArtifactRecord, Workspace, canonical_json, id_number

OUTCOME_RANK = {"allow": 0, "downgrade": 1, "block": 2}
NUMERAL = re.compile(r"(?<![\w.])-?\d+(?:\.\d+)?(?![\w.])")


@dataclass
class ValidatorFinding:
    validator_id: str
    failure_class: str
    offending_artifacts: list[str]
    severity: str
    recommended_action: str
    detail: dict[str, Any] = field(default_factory=dict)
    id: str | None = None
    iteration: int | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "validator_id": self.validator_id,
            "failure_class": self.failure_class,
            "offending_artifacts": list(self.offending_artifacts),
            "severity": self.severity,
            "recommended_action": self.recommended_action,
            "detail": self.detail,
            "iteration": self.iteration,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ValidatorFinding":
        return cls(**{k: data[k] for k in cls.__dataclass_fields__ if k in data})


@dataclass
class GateDecision:
    gate_id: str
    outcome: str
    findings: list[ValidatorFinding] = field(default_factory=list)
    rollback_target: tuple[int, str] | None = None
    reason: str = ""
    iteration: int | None = None
    cites: list[str] = field(default_factory=list)
    id: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "gate_id": self.gate_id,
            "outcome": self.outcome,
            "findings": [f.to_dict() for f in self.findings],
            "rollback_target": list(self.rollback_target) if self.rollback_target else None,
            "reason": self.reason,
            "iteration": self.iteration,
            "cites": list(self.cites),
        }

    def canonical(self) -> str:
        return canonical_json(self.to_dict())


def _finding(validator: str, failure_class: str, offending: Sequence[str], severity: str = "critical",
             action: str = "repair-task", **detail: Any) -> ValidatorFinding:
    return ValidatorFinding(validator, failure_class, sorted(set(offending), key=id_number), severity, action, detail)


# -- validators ---------------------------------------------------------------


def detect_duplicates(ws: Workspace, result_set: Iterable[str]) -> list[ValidatorFinding]:
    classes: dict[str, list[ArtifactRecord]] = {}
    for aid in result_set:
        art = ws.artifact(aid)
        if art is None or art.kind not in ("result-table", "run-log"):
            raise ValueError(f"{aid} is not a result-table or run-log artifact")
        classes.setdefault(art.content_hash, []).append(art)
    findings = []
    for digest, members in sorted(classes.items(), key=lambda kv: min(id_number(a.id) for a in kv[1])):
        conditions = sorted({a.meta.get("condition", a.rel_path) for a in members})
        if len(members) < 2 or len(conditions) < 2:
            continue
        members.sort(key=lambda a: id_number(a.id))
        findings.append(
            _finding(
                "duplicate-results",
                "duplicate-results",
                [a.id for a in members],
                hash=digest,
                conditions=conditions,
                source=members[0].id,
                duplicates=[a.id for a in members[1:]],
            )
        )
    return findings


def ci_violations(stats: Sequence[Sequence[float]]) -> list[tuple[int, str]]:
    """Indices of (point, lower, upper) triples that break lower <= point <= upper."""
    out = []
    for i, triple in enumerate(stats):
        point, lower, upper = (float(x) for x in triple)
        if not all(math.isfinite(x) for x in (point, lower, upper)):
            out.append((i, "non-finite statistic"))
        elif not (lower <= point <= upper):
            out.append((i, "ci-inversion"))
    return out


def detect_ci_inversion(stats: Sequence[Sequence[float]], artifact_id: str = "", names: Sequence[str] = ()) -> list[ValidatorFinding]:
    findings = []
    for i, failure_class in ci_violations(stats):
        point, lower, upper = stats[i]
        findings.append(
            _finding(
                "ci-inversion",
                failure_class,
                [artifact_id] if artifact_id else [],
                index=i,
                name=names[i] if i < len(names) else None,
                point=point,
                lower=lower,
                upper=upper,
            )
        )
    return findings


def relative_gap(claimed: float, canonical: float) -> float:
    if canonical == 0:
        return math.inf if claimed != 0 else 0.0
    return abs(claimed - canonical) / abs(canonical)


def detect_stale_numbers(
    draft: dict[str, Any],
    canonical: dict[str, Any],
    tolerance: float = 1e-9,
    *,
    draft_id: str = "",
    canonical_id: str = "",
    claim_tolerances: dict[str, float] | None = None,
) -> list[ValidatorFinding]:
    """Compare a draft's tracked numbers with the canonical result values."""
    values = canonical.get("values", {})
    claim_tolerances = claim_tolerances or {}
    offending = [x for x in (draft_id, canonical_id) if x]
    findings = []
    tracked: list[float] = []
    for entry in draft.get("numbers", []):
        name = entry.get("name")
        claimed = float(entry["value"])
        tracked.append(claimed)
        if name not in values:
            continue
        source = float(values[name])
        tol = claim_tolerances.get(entry.get("claim", ""), tolerance)
        if relative_gap(claimed, source) > tol:
            findings.append(
                _finding("stale-number", "stale-number", offending, name=name, claim=entry.get("claim"),
                         claimed=claimed, canonical=source)
            )
    for section in ("statistics",):
        tracked.extend(float(e["value"]) for e in draft.get(section, []) if "value" in e)
    tracked.extend(float(v) for v in draft.get("config_claims", {}).values() if isinstance(v, (int, float)))
    for m in NUMERAL.findall(draft.get("text", "")):
        x = float(m)
        if not any(relative_gap(x, t) <= tolerance for t in tracked):
            findings.append(
                _finding("stale-number", "untracked number", [draft_id] if draft_id else [], "minor", "none",
                         numeral=m)
            )
    return findings


def detect_manifest_mismatch(
    config_claims: dict[str, Any], manifest: dict[str, Any], *, draft_id: str = "", manifest_id: str = ""
) -> list[ValidatorFinding]:
    config = manifest.get("config", manifest)
    findings = []
    for key in sorted(config_claims):
        claimed = config_claims[key]
        if key not in config or config[key] != claimed:
            findings.append(
                _finding(
                    "manifest-mismatch",
                    "manifest-mismatch",
                    [x for x in (draft_id, manifest_id) if x],
                    key=key,
                    claimed=claimed,
                    manifest=config.get(key),
                )
            )
    return findings


def detect_unsupported_statistics(
    ws: Workspace, statistics: Iterable[dict[str, Any]], *, draft_id: str = "", tolerance: float = 1e-9
) -> list[ValidatorFinding]:
    findings = []
    for stat in statistics:
        name, value, source = stat.get("name"), float(stat["value"]), stat.get("source")
        art = ws.live(source) if source else None
        if art is None or not ws.abspath(art.rel_path).is_file():
            findings.append(
                _finding("unsupported-statistic", "unresolvable source", [draft_id], name=name, claimed=value,
                         source=source)
            )
            continue
        stored = ws.read_artifact_json(art).get("values", {}).get(name)
        if stored is None or relative_gap(value, float(stored)) > tolerance:
            findings.append(
                _finding("unsupported-statistic", "unsupported-statistic", [draft_id, art.id], name=name,
                         claimed=value, stored=stored)
            )
    return findings


def detect_missing_review(ws: Workspace, iteration: int) -> list[ValidatorFinding]:
    review = ws.latest(iteration, "review")
    if review is not None:
        try:
            score = ws.read_artifact_json(review).get("score")
        except (OSError, ValueError):
            score = None
        if isinstance(score, (int, float)) and not isinstance(score, bool) and math.isfinite(score):
            return []
    anchor = review or ws.latest(iteration, "draft") or ws.latest(iteration, "action-plan")
    return [
        _finding(
            "missing-review",
            "missing-review",
            [anchor.id] if anchor else [],
            "critical",
            "block",
            reason="no numeric review score for this iteration",
        )
    ]


def detect_pilot_boundary(ws: Workspace, draft: dict[str, Any], draft_id: str) -> list[ValidatorFinding]:
    uses = list(draft.get("claim_uses", []))
    uses += [{"claim": cid, "usage": "headline"} for cid in draft.get("headline_refs", [])]
    findings = []
    for use in uses:
        cid, usage = use["claim"], use["usage"]
        rec = ws.get_record("claims", cid)
        if rec is None:
            findings.append(_finding("pilot-boundary", "unregistered claim", [draft_id], claim=cid, usage=usage,
                                     action="downgrade"))
            continue
        result = evidence.check_claim(ws, evidence.ClaimRecord.from_dict(rec), usage)
        if result.outcome == "allow":
            continue
        severity = "critical" if result.outcome == "block" else "major"
        failure_class = "pilot-boundary" if rec["maturity"] == "PilotSignal" else "maturity-boundary"
        findings.append(
            _finding("pilot-boundary", failure_class, [draft_id], severity, "downgrade", claim=cid, usage=usage,
                     outcome=result.to_dict())
        )
    return findings


def detect_missing_outputs(ws: Workspace, iteration: int) -> list[ValidatorFinding]:
    from harness import orchestrator

    findings = []
    plan_art = ws.latest(iteration, "action-plan")
    for task in orchestrator.tasks_for_iteration(ws, iteration):
        if task.status not in ("completed", "running"):
            continue
        for kind in task.outputs:
            arts = [a for a in ws.artifacts(kind=kind) if a.meta.get("task") == task.id]
            if any(ws.artifact_intact(a) for a in arts):
                continue
            offending = [a.id for a in arts] or ([plan_art.id] if plan_art else [])
            findings.append(
                _finding("missing-output", "missing-output", offending, task=task.id, kind=kind,
                         reason="deleted or altered" if arts else "never produced")
            )
    return findings


# -- gate evaluation ------------------------------------------------------------


def _draft(ws: Workspace, iteration: int) -> tuple[ArtifactRecord | None, dict[str, Any]]:
    art = ws.latest(iteration, "draft")
    if art is None or not ws.abspath(art.rel_path).is_file():
        return art, {}
    return art, ws.read_artifact_json(art)


def _canonical(ws: Workspace, iteration: int, draft: dict[str, Any]) -> ArtifactRecord | None:
    src = draft.get("canonical")
    if src and ws.artifact(src):
        return ws.live(src)
    tables = [a for a in ws.latest_attempt(iteration, "result-table") if a.meta.get("canonical")]
    return max(tables, key=lambda a: id_number(a.id)) if tables else None


def run_validator(ws: Workspace, validator: str, iteration: int) -> list[ValidatorFinding]:
    cfg = ws.config()
    tol = float(cfg.get("stale_tolerance", 1e-9))
    if validator == "missing-review":
        return detect_missing_review(ws, iteration)
    if validator == "missing-output":
        return detect_missing_outputs(ws, iteration)
    if validator == "duplicate-results":
        ids = [a.id for a in ws.latest_attempt(iteration, "result-table") + ws.latest_attempt(iteration, "run-log")]
        return detect_duplicates(ws, ids)
    if validator == "ci-inversion":
        out = []
        for art in ws.latest_attempt(iteration, "result-table"):
            intervals = ws.read_artifact_json(art).get("intervals", [])
            stats = [(iv["point"], iv["lower"], iv["upper"]) for iv in intervals]
            out += detect_ci_inversion(stats, art.id, [iv.get("name", "") for iv in intervals])
        return out
    draft_art, draft = _draft(ws, iteration)
    if draft_art is None:
        return []
    if validator == "stale-number":
        canon = _canonical(ws, iteration, draft)
        canonical = ws.read_artifact_json(canon) if canon else {}
        tolerances = {}
        for c in evidence.claims(ws):
            if c.tolerance is not None:
                tolerances[c.id] = c.tolerance
        return detect_stale_numbers(draft, canonical, tol, draft_id=draft_art.id,
                                    canonical_id=canon.id if canon else "", claim_tolerances=tolerances)
    if validator == "manifest-mismatch":
        claims = draft.get("config_claims", {})
        if not claims:
            return []
        man_id = draft.get("manifest")
        man = ws.live(man_id) if man_id else ws.latest(iteration, "run-manifest")
        manifest = ws.read_artifact_json(man) if man else {}
        return detect_manifest_mismatch(claims, manifest, draft_id=draft_art.id, manifest_id=man.id if man else "")
    if validator == "unsupported-statistic":
        return detect_unsupported_statistics(ws, draft.get("statistics", []), draft_id=draft_art.id, tolerance=tol)
    if validator == "pilot-boundary":
        return detect_pilot_boundary(ws, draft, draft_art.id)
    raise ValueError(f"unknown validator {validator!r}")


def outcome_for(cfg: dict[str, Any], finding: ValidatorFinding) -> str:
    rules = cfg.get("gate_rules", {})
    table = rules.get(finding.validator_id, rules.get("default", {}))
    return table.get(finding.severity, rules.get("default", {}).get(finding.severity, "block"))


def aggregate(cfg: dict[str, Any], findings: Sequence[ValidatorFinding]) -> str:
    outcome = "allow"
    for f in findings:
        o = outcome_for(cfg, f)
        if OUTCOME_RANK[o] > OUTCOME_RANK[outcome]:
            outcome = o
    return outcome


def evaluate_gate(ws: Workspace, gate_id: str, iteration: int) -> GateDecision:
    """Pure evaluation: no records written, no events appended."""
    cfg = ws.config()
    validators = cfg.get("gates", {}).get(gate_id, {}).get("validators", [])
    findings: list[ValidatorFinding] = []
    for v in validators:
        for f in run_validator(ws, v, iteration):
            f.iteration = iteration
            findings.append(f)
    outcome = aggregate(cfg, findings)
    reasons = sorted({f"{f.validator_id}:{f.failure_class}" for f in findings if outcome_for(cfg, f) != "allow"})
    cites: list[str] = []
    rollback_target = None
    if gate_id == "quality-gate":
        if any(f.validator_id == "missing-review" for f in findings):
            rollback_target = (iteration, "review")
            outcome = "block"
        pending = roles.open_objections(ws, iteration, "major")
        if pending:
            cites = [o.id for o in pending]
            reasons.append(f"{len(pending)} open objection(s) of severity >= major")
            if outcome == "allow":
                outcome = "downgrade"
    return GateDecision(
        gate_id=gate_id,
        outcome=outcome,
        findings=findings,
        rollback_target=rollback_target,
        reason="; ".join(reasons) if reasons else "clean",
        iteration=iteration,
        cites=cites,
    )


def evaluate_quality_gate(ws: Workspace, iteration: int) -> GateDecision:
    return evaluate_gate(ws, "quality-gate", iteration)


def log_decision(ws: Workspace, decision: GateDecision, *, subject: str | None = None) -> GateDecision:
    """Persist findings and the decision; each becomes one event."""
    it = decision.iteration if decision.iteration is not None else ws.iteration
    for f in decision.findings:
        f.id = ws.new_id("fnd", "findings")
        f.iteration = it
        ws.commit(
            "validator-finding",
            [("findings", f.id, f.to_dict())],
            refs=[f.id, *f.offending_artifacts],
            payload={"validator_id": f.validator_id, "severity": f.severity, "gate_id": decision.gate_id},
        )
    decision.id = ws.new_id("gate", "gates")
    record = decision.to_dict()
    record["findings"] = [f.id for f in decision.findings]
    if subject:
        record["subject"] = subject
    refs = [decision.id, *(f.id for f in decision.findings), *decision.cites, *([subject] if subject else [])]
    ws.commit(
        "gate-decision",
        [("gates", decision.id, record)],
        refs=refs,
        payload={"gate_id": decision.gate_id, "outcome": decision.outcome},
    )
    return decision


def run_gate(ws: Workspace, gate_id: str, iteration: int | None = None) -> GateDecision:
    it = ws.iteration if iteration is None else iteration
    return log_decision(ws, evaluate_gate(ws, gate_id, it))


def run_quality_gate(ws: Workspace, iteration: int | None = None) -> GateDecision:
    return run_gate(ws, "quality-gate", iteration)


def evaluate_guard(ws: Workspace, guard: dict[str, Any], iteration: int) -> GateDecision | None:
    kind = guard["guard"]
    if kind == "review-score":
        findings = detect_missing_review(ws, iteration)
        if not findings:
            return None
        for f in findings:
            f.iteration = iteration
        decision = GateDecision(
            gate_id=guard.get("gate_id", "quality-gate"),
            outcome="block",
            findings=findings,
            rollback_target=(iteration, "review"),
            reason="missing-review:missing-review",
            iteration=iteration,
        )
        return log_decision(ws, decision)
    if kind == "rollback-pending":
        rec = latest_decision(ws, guard.get("gate_id", "quality-gate"), iteration)
        if rec and rec["outcome"] == "block" and rec.get("rollback_target"):
            rolled = any(rec["id"] in e.refs for e in ws.events("rollback"))
            if not rolled:
                return decision_from_record(ws, rec)
        return None
    raise ValueError(f"unknown guard {kind!r}")


def decision_from_record(ws: Workspace, rec: dict[str, Any]) -> GateDecision:
    findings = [ValidatorFinding.from_dict(ws.get_record("findings", fid)) for fid in rec.get("findings", [])]
    target = rec.get("rollback_target")
    return GateDecision(
        gate_id=rec["gate_id"],
        outcome=rec["outcome"],
        findings=findings,
        rollback_target=tuple(target) if target else None,
        reason=rec.get("reason", ""),
        iteration=rec.get("iteration"),
        cites=rec.get("cites", []),
        id=rec["id"],
    )


def decisions(ws: Workspace) -> list[dict[str, Any]]:
    return sorted(ws.list_records("gates"), key=lambda r: id_number(r["id"]))


def latest_decision(ws: Workspace, gate_id: str | None = None, iteration: int | None = None) -> dict[str, Any] | None:
    out = None
    for rec in decisions(ws):
        if gate_id is not None and rec["gate_id"] != gate_id:
            continue
        if iteration is not None and rec.get("iteration") != iteration:
            continue
        out = rec
    return out


def findings(ws: Workspace) -> list[ValidatorFinding]:
    return [ValidatorFinding.from_dict(r) for r in sorted(ws.list_records("findings"), key=lambda r: id_number(r["id"]))]


# -- pilot readiness --------------------------------------------------------------


def pilot_gate(ws: Workspace, task_id: str, ready: bool, *, refs: Iterable[str] = (), reason: str = "") -> GateDecision:
    decision = GateDecision(
        gate_id="pilot-readiness",
        outcome="allow" if ready else "block",
        reason=reason or ("pilot ready" if ready else "pilot not ready to proceed"),
        iteration=ws.iteration,
        cites=list(refs),
    )
    return log_decision(ws, decision, subject=task_id)


def latest_pilot_decision(ws: Workspace, task_id: str) -> dict[str, Any] | None:
    out = None
    for rec in decisions(ws):
        if rec["gate_id"] == "pilot-readiness" and rec.get("subject") == task_id:
            out = rec
    return out


def pilot_ready(ws: Workspace, task_id: str) -> bool:
    rec = latest_pilot_decision(ws, task_id)
    return rec is not None and rec["outcome"] == "allow"


def report_table(decision: GateDecision) -> str:
    lines = [f"gate {decision.gate_id} iteration {decision.iteration}: {decision.outcome.upper()} ({decision.reason})"]
    if decision.rollback_target:
        lines.append(f"  rollback -> iteration {decision.rollback_target[0]}, stage {decision.rollback_target[1]}")
    if decision.findings:
        lines.append(f"  {'id':<10} {'validator':<22} {'class':<24} {'severity':<9} {'action':<12} artifacts")
        for f in decision.findings:
            lines.append(
                f"  {f.id or '-':<10} {f.validator_id:<22} {f.failure_class:<24} {f.severity:<9} "
                f"{f.recommended_action:<12} {','.join(f.offending_artifacts)}"
            )
    return "\n".join(lines)
