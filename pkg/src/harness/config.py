"""Default configuration tables.

Every policy the kernel applies (stage transitions, gate rules, routing,
authority, evolution mapping) is data in ``registry/config.json`` so that
self-evolution can change it and the rollback log can restore it.
"""

from __future__ import annotations

import copy
from typing import Any

STAGES = (
    "ideation",
    "planning",
    "experiment",
    "validation",
    "review",
    "reflection",
    "writing",
    "quality-gate",
)

STAGE_GROUPS = {
    "ideation": "harness",
    "planning": "harness",
    "reflection": "harness",
    "experiment": "experiment",
    "validation": "validation",
    "quality-gate": "validation",
    "review": "review",
    "writing": "writing",
}

AUDIT_GROUPS = ("harness", "experiment", "validation", "review", "writing")

ROLES = (
    "planner",
    "experimenter",
    "critic",
    "supervisor",
    "skeptic",
    "methodologist",
    "writer",
    "editor",
    "scheduler",
)

ACTIONS = (
    "emit-artifact",
    "emit-raw-number",
    "raise-objection",
    "mutate-plan",
    "promote-claim",
    "downgrade-claim",
    "scoped-allow",
    "record-spend",
)

ISSUE_CATEGORIES = (
    "system",
    "experiment",
    "writing",
    "analysis",
    "planning",
    "pipeline",
    "ideation",
    "efficiency",
)

VALIDATORS = (
    "duplicate-results",
    "ci-inversion",
    "stale-number",
    "manifest-mismatch",
    "unsupported-statistic",
    "missing-review",
    "pilot-boundary",
    "missing-output",
)


def _authority() -> dict[str, dict[str, bool]]:
    allow = {
        "planner": {"emit-artifact", "mutate-plan", "raise-objection"},
        "experimenter": {"emit-artifact", "emit-raw-number", "record-spend"},
        "critic": {"emit-artifact", "raise-objection", "downgrade-claim"},
        "supervisor": {
            "emit-artifact",
            "emit-raw-number",
            "raise-objection",
            "promote-claim",
            "downgrade-claim",
            "scoped-allow",
        },
        "skeptic": {"emit-artifact", "raise-objection", "downgrade-claim"},
        "methodologist": {"emit-artifact", "emit-raw-number", "raise-objection", "promote-claim", "downgrade-claim"},
        "writer": {"emit-artifact"},
        "editor": {"emit-artifact", "downgrade-claim"},
        "scheduler": {"emit-artifact", "mutate-plan", "record-spend"},
    }
    return {role: {action: action in allow[role] for action in ACTIONS} for role in ROLES}


DEFAULT_CONFIG: dict[str, Any] = {
    "schema_version": 1,
    "stages": list(STAGES),
    "stage_groups": dict(STAGE_GROUPS),
    "policy": {
        "ideation": ["planning"],
        "planning": ["experiment"],
        "experiment": ["experiment", "validation"],
        "validation": ["review", "experiment", "planning"],
        "review": ["review", "reflection", "experiment"],
        "reflection": ["writing", "planning"],
        "writing": ["writing", "quality-gate", "review"],
        "quality-gate": ["planning"],
    },
    # Transitions that move into the next iteration.
    "iteration_boundaries": ["quality-gate->planning"],
    "guards": {
        "writing->quality-gate": {"guard": "review-score", "gate_id": "quality-gate"},
        "quality-gate->planning": {"guard": "rollback-pending", "gate_id": "quality-gate"},
    },
    "gates": {
        "validation": {"validators": ["missing-output"]},
        "quality-gate": {
            "validators": [
                "missing-review",
                "duplicate-results",
                "ci-inversion",
                "stale-number",
                "manifest-mismatch",
                "unsupported-statistic",
                "pilot-boundary",
            ]
        },
    },
    # Severity -> outcome, with per-validator overrides.
    "gate_rules": {
        "default": {"critical": "block", "major": "downgrade", "minor": "allow"},
        "stale-number": {"critical": "downgrade", "major": "downgrade", "minor": "allow"},
    },
    "stale_tolerance": 1e-9,
    "routing": {
        "experiment": ["experimenter", "planner"],
        "analysis": ["supervisor", "critic"],
        "writing": ["writer", "editor"],
        "system": ["supervisor", "scheduler"],
        "planning": ["planner"],
        "pipeline": ["scheduler", "experimenter"],
        "ideation": ["planner", "skeptic"],
        "efficiency": ["scheduler"],
    },
    "memory": {"halflife": 4.0, "threshold": 0.25, "global_min_frequency": 2},
    "authority": _authority(),
    "role_order": list(ROLES),
    "evolution": {
        "threshold": 2,
        "mapping": {
            "duplicate-results": {
                "kind": "gate",
                "op": "enable-validator",
                "gate": "quality-gate",
                "validator": "duplicate-results",
                "note": "duplicate detection and single-source analysis prerequisites",
            },
            "ci-inversion": {
                "kind": "gate",
                "op": "enable-validator",
                "gate": "quality-gate",
                "validator": "ci-inversion",
                "note": "source-to-draft validation with interval checks",
            },
            "stale-number": {
                "kind": "gate",
                "op": "enable-validator",
                "gate": "quality-gate",
                "validator": "stale-number",
                "note": "quality-gated aggregation of headline numbers",
            },
            "manifest-mismatch": {
                "kind": "artifact-contract",
                "op": "enable-validator",
                "gate": "quality-gate",
                "validator": "manifest-mismatch",
                "note": "claim generation blocked until manifest and run agree",
            },
            "unsupported-statistic": {
                "kind": "gate",
                "op": "enable-validator",
                "gate": "quality-gate",
                "validator": "unsupported-statistic",
                "note": "statistics must cite a stored source value",
            },
            "pilot-boundary": {
                "kind": "gate",
                "op": "enable-validator",
                "gate": "quality-gate",
                "validator": "pilot-boundary",
                "note": "pilot signals cannot be stated as general claims",
            },
            "missing-output": {
                "kind": "artifact-contract",
                "op": "enable-validator",
                "gate": "validation",
                "validator": "missing-output",
                "note": "declared task outputs checked before review",
            },
            "missing-telemetry": {
                "kind": "telemetry-requirement",
                "op": "require-telemetry",
                "field": "duration",
                "note": "spends must carry timing",
            },
            "wasteful-run": {
                "kind": "scheduler-policy",
                "op": "set-scheduler",
                "key": "cheap_check_first",
                "value": True,
                "note": "schedule declared proxy checks ahead of expensive runs",
            },
        },
        # Failure classes without an entry fall back to a prompt overlay.
        "fallback": {"kind": "prompt-overlay", "op": "add-overlay"},
    },
    "scheduler": {"cheap_check_first": True},
    "telemetry_requirements": [],
    "budget": {"total_units": 1000.0},
}


def default_config() -> dict[str, Any]:
    return copy.deepcopy(DEFAULT_CONFIG)


def default_protected() -> dict[str, Any]:
    return {
        "schema_version": 1,
        "constraints": [
            {"id": "pc-review-score", "protects": "guard:writing->quality-gate", "rule": "no-delete"},
            {"id": "pc-missing-review", "protects": "validator:quality-gate:missing-review", "rule": "no-weaken"},
            {"id": "pc-gate-rules", "protects": "config:gate_rules", "rule": "no-weaken"},
            {"id": "pc-authority", "protects": "config:authority", "rule": "approval-required"},
            {"id": "pc-protected-conf", "protects": "file:registry/protected.conf", "rule": "approval-required"},
        ],
    }


def validate_config(config: dict[str, Any]) -> list[str]:
    """Return problems with ``config``; empty means valid."""
    problems: list[str] = []
    stages = config.get("stages", [])
    for stage in stages:
        if stage not in config.get("stage_groups", {}):
            problems.append(f"stage {stage!r} has no audit group")
        elif config["stage_groups"][stage] not in AUDIT_GROUPS:
            problems.append(f"stage {stage!r} maps to unknown group")
    for src, targets in config.get("policy", {}).items():
        for t in [src, *targets]:
            if t not in stages:
                problems.append(f"policy names unknown stage {t!r}")
    routing = config.get("routing", {})
    for cat in ISSUE_CATEGORIES:
        roles = routing.get(cat) or []
        if not roles:
            problems.append(f"category {cat!r} routes to no role")
        for r in roles:
            if r not in ROLES:
                problems.append(f"category {cat!r} routes to unknown role {r!r}")
    authority = config.get("authority", {})
    for role in ROLES:
        row = authority.get(role)
        if row is None:
            problems.append(f"authority matrix lacks role {role!r}")
            continue
        for action in ACTIONS:
            if not isinstance(row.get(action), bool):
                problems.append(f"authority matrix lacks explicit entry for ({role}, {action})")
    for gate, spec in config.get("gates", {}).items():
        for v in spec.get("validators", []):
            if v not in VALIDATORS:
                problems.append(f"gate {gate!r} names unknown validator {v!r}")
    return problems
