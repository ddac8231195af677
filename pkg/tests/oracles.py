"""Independent reference implementations used by the tests."""

from __future__ import annotations

from harness.evidence import MaturityLevel as M

REQUIRED = {"pilot-mention": M.PilotSignal, "general-claim": M.PaperReady, "headline": M.AuditedClaim}


def level_invariant(level: M, edges, validation_status: str) -> bool:
    """The ladder rules stated per level, checked literally."""
    if level >= M.AnalysisReady:
        if validation_status != "passed":
            return False
        if not any(kind == "supports" and art == "result-table" for kind, art, _ in edges):
            return False
    if level >= M.PaperReady:
        for kind, _, seq in edges:
            if kind == "contradicts" and not any(k2 == "validates" and s2 > seq for k2, _, s2 in edges):
                return False
    return True


def claim_oracle(recorded: M, edges, validation_status: str, usage: str) -> tuple[str, M | None]:
    """Brute force: walk down from the recorded level to the highest level whose rules hold."""
    if any(art is None for _, art, _ in edges):
        return "block", None
    need = REQUIRED[usage]
    if recorded < need:
        return "block", None
    supported = next(lv for lv in sorted(M, reverse=True) if lv <= recorded and level_invariant(lv, edges,
                                                                                                  validation_status))
    if supported >= need:
        return "allow", recorded
    if supported < M.PilotSignal:
        return "block", None
    return "downgrade", supported


def pairwise_transitions(events) -> dict[tuple[str, str], int]:
    """For every stage-end, look ahead to the next stage boundary event."""
    out: dict[tuple[str, str], int] = {}
    for i, e in enumerate(events):
        if e.kind != "stage-end":
            continue
        for f in events[i + 1:]:
            if f.kind == "stage-end":
                break
            if f.kind == "stage-start":
                key = (e.stage, f.stage)
                out[key] = out.get(key, 0) + 1
                break
    return out
