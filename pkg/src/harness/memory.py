"""Issue normalization, lesson overlays with decay, and the evolution digest.

Issues are keyed by (category, normalized failure class). Each issue is
routed to the roles listed for its category; the resulting overlays lose
relevance by half every ``halflife`` iterations unless the issue recurs.
"""

from __future__ import annotations

import difflib
import json
import os
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable

from harness.config import ISSUE_CATEGORIES
from harness.store import Workspace, dump_pretty, id_number


@dataclass
class IssueRecord:
    id: str
    category: str
    failure_class: str
    severity: str
    frequency: int
    affected_roles: list[str]
    suggested_action: str
    source_refs: list[str]
    status: str = "open"
    occurrences: list[dict[str, Any]] = field(default_factory=list)
    first_iteration: int = 0
    last_iteration: int = 0
    notes: list[str] = field(default_factory=list)

    @property
    def key(self) -> tuple[str, str]:
        return self.category, self.failure_class

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "IssueRecord":
        return cls(**{k: data[k] for k in cls.__dataclass_fields__ if k in data})


@dataclass
class LessonOverlay:
    id: str
    role: str
    lesson: str
    relevance: float
    decay_halflife_iterations: float
    reopen_criteria: str
    source_issues: list[str]
    failure_class: str = ""
    category: str = ""
    anchor_iteration: int = 0
    origin: str = "local"

    def decayed(self, iteration: int) -> float:
        return decay(self.relevance, iteration - self.anchor_iteration, self.decay_halflife_iterations)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "LessonOverlay":
        return cls(**{k: data[k] for k in cls.__dataclass_fields__ if k in data})


def decay(relevance: float, elapsed: float, halflife: float) -> float:
    return relevance * 2.0 ** (-max(elapsed, 0) / halflife)


def normalize_failure_class(text: str) -> str:
    return re.sub(r"[^a-z0-9]+", "-", text.strip().lower()).strip("-")


def coerce_category(category: str) -> tuple[str, bool]:
    c = category.strip().lower()
    if c in ISSUE_CATEGORIES:
        return c, False
    close = difflib.get_close_matches(c, ISSUE_CATEGORIES, n=1, cutoff=0.0)
    return (close[0] if close else "system"), True


def issues(ws: Workspace) -> list[IssueRecord]:
    return [IssueRecord.from_dict(r) for r in ws.list_records("issues")]


def find_issue(ws: Workspace, category: str, failure_class: str) -> IssueRecord | None:
    fc = normalize_failure_class(failure_class)
    for issue in issues(ws):
        if issue.category == category and issue.failure_class == fc:
            return issue
    return None


def _key_index(ws: Workspace) -> dict[tuple[str, str], IssueRecord]:
    return {i.key: i for i in issues(ws)}


def normalize(ws: Workspace, reflection_id: str, *, route_issues: bool = True) -> list[IssueRecord]:
    """Turn one structured reflection artifact into issue records."""
    art = ws.artifact(reflection_id)
    if art is None:
        raise KeyError(reflection_id)
    content = ws.read_artifact_json(art)
    it = art.iteration
    cfg = ws.config()
    global_min = int(cfg["memory"].get("global_min_frequency", 2))
    index = _key_index(ws)
    out: list[IssueRecord] = []
    for entry in content.get("issues", []):
        category, coerced = coerce_category(entry.get("category", "system"))
        fc = normalize_failure_class(entry.get("failure_class") or entry.get("title", "unspecified"))
        occurrence = {"iteration": it, "artifact": art.id}
        payload: dict[str, Any] = {"category": category, "failure_class": fc}
        if coerced:
            payload["finding"] = {
                "severity": "minor",
                "failure_class": "category coerced",
                "from": entry.get("category"),
                "to": category,
            }
        issue = index.get((category, fc))
        if issue is None:
            issue = IssueRecord(
                id=ws.new_id("iss", "issues"),
                category=category,
                failure_class=fc,
                severity=entry.get("severity", "major"),
                frequency=1,
                affected_roles=list(entry.get("affected_roles") or cfg["routing"][category]),
                suggested_action=entry.get("suggested_action", ""),
                source_refs=[art.id],
                occurrences=[occurrence],
                first_iteration=it,
                last_iteration=it,
            )
            op = "create"
        else:
            issue.frequency += 1
            if art.id not in issue.source_refs:
                issue.source_refs.append(art.id)
            issue.occurrences.append(occurrence)
            issue.last_iteration = it
            if entry.get("suggested_action"):
                issue.suggested_action = entry["suggested_action"]
            if issue.status == "addressed":
                issue.status = "reopened"
            op = "recur"
        if coerced:
            issue.notes.append(f"category coerced from {entry.get('category')!r}")
        payload["op"] = op
        payload["frequency"] = issue.frequency
        ws.commit("memory-update", [("issues", issue.id, issue.to_dict())], refs=[issue.id, art.id], payload=payload)
        index[issue.key] = issue
        out.append(issue)
        if issue.frequency >= global_min:
            write_global(ws, issue, cfg)
        if route_issues:
            route(ws, issue, cfg)
    return out


def overlay_id(role: str, issue_id: str) -> str:
    return f"ovl-{role}-{issue_id.rsplit('-', 1)[1]}"


def route(ws: Workspace, issue: IssueRecord, cfg: dict[str, Any] | None = None) -> list[LessonOverlay]:
    cfg = cfg or ws.config()
    halflife = float(cfg["memory"]["halflife"])
    it = ws.iteration
    out = []
    for role in cfg["routing"][issue.category]:
        oid = overlay_id(role, issue.id)
        rec = ws.get_record("overlays", oid)
        overlay = LessonOverlay.from_dict(rec) if rec else None
        if overlay is None:
            overlay = LessonOverlay(
                id=oid,
                role=role,
                lesson=issue.suggested_action or f"{issue.category}: {issue.failure_class}",
                relevance=1.0,
                decay_halflife_iterations=halflife,
                reopen_criteria=f"failure class {issue.failure_class!r} recurs",
                source_issues=[issue.id],
                failure_class=issue.failure_class,
                category=issue.category,
                anchor_iteration=it,
            )
            op = "overlay-create"
        else:
            overlay.relevance = 1.0
            overlay.anchor_iteration = it
            overlay.lesson = issue.suggested_action or overlay.lesson
            op = "overlay-reinforce"
        ws.commit("memory-update", [("overlays", overlay.id, overlay.to_dict())], refs=[overlay.id, issue.id],
                  payload={"op": op, "role": role})
        out.append(overlay)
    return out


def overlays_for(ws: Workspace, role: str, iteration: int | None = None) -> list[LessonOverlay]:
    it = ws.iteration if iteration is None else iteration
    threshold = float(ws.config()["memory"]["threshold"])
    out = []
    for rec in ws.list_records("overlays"):
        o = LessonOverlay.from_dict(rec)
        if o.role != role:
            continue
        r = o.decayed(it)
        if r >= threshold:
            o.relevance = r
            out.append(o)
    out.sort(key=lambda o: (-o.relevance, id_number(o.id)))
    return out


def overlay_path(ws: Workspace, overlay_id: str) -> Path:
    return ws.root / "memory" / "overlays" / f"{overlay_id}.json"


def mark_addressed(ws: Workspace, issue_ids: Iterable[str], *, via: str) -> list[IssueRecord]:
    out = []
    for iid in issue_ids:
        rec = ws.get_record("issues", iid)
        if rec is None:
            continue
        issue = IssueRecord.from_dict(rec)
        if issue.status == "addressed":
            continue
        issue.status = "addressed"
        ws.commit("memory-update", [("issues", issue.id, issue.to_dict())], refs=[issue.id, via],
                  payload={"op": "status", "status": "addressed"})
        out.append(issue)
    return out


def digest(ws: Workspace, min_frequency: int = 2) -> dict[str, int]:
    counts = {c: 0 for c in ISSUE_CATEGORIES}
    for issue in issues(ws):
        if issue.frequency >= min_frequency:
            counts[issue.category] += 1
    return counts


def digest_table(counts: dict[str, int]) -> str:
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    lines = [f"{'category':<12} {'patterns':>8}"]
    lines += [f"{c:<12} {n:>8}" for c, n in ordered]
    lines.append(f"{'total':<12} {sum(counts.values()):>8}")
    return "\n".join(lines)


# -- global memory -------------------------------------------------------------


def _global_file(ws: Workspace, category: str, failure_class: str) -> Path:
    return ws.global_memory_dir / f"{category}--{failure_class}.json"


def write_global(ws: Workspace, issue: IssueRecord, cfg: dict[str, Any] | None = None) -> Path:
    """Mirror a recurring issue into the shared lesson store."""
    path = _global_file(ws, issue.category, issue.failure_class)
    path.parent.mkdir(parents=True, exist_ok=True)
    project = ws.manifest.get("name", ws.root.name)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        data = {"category": issue.category, "failure_class": issue.failure_class, "projects": {}}
    data["lesson"] = issue.suggested_action or f"{issue.category}: {issue.failure_class}"
    data["roles"] = (cfg or ws.config())["routing"][issue.category]
    data["projects"][project] = {"issue": issue.id, "frequency": issue.frequency}
    data["frequency"] = sum(p["frequency"] for p in data["projects"].values())
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(dump_pretty(data), encoding="utf-8")
    os.replace(tmp, path)
    return path


def global_lessons(ws: Workspace) -> list[dict[str, Any]]:
    d = ws.global_memory_dir
    if not d.is_dir():
        return []
    return [json.loads(p.read_text(encoding="utf-8")) for p in sorted(d.glob("*--*.json"))]


def sync_global(ws: Workspace) -> list[LessonOverlay]:
    """Inject lessons learned in other projects as local overlays."""
    project = ws.manifest.get("name", ws.root.name)
    halflife = float(ws.config()["memory"]["halflife"])
    have = {(o["role"], o.get("origin")) for o in ws.list_records("overlays")}
    synced = sum(1 for _, origin in have if origin and origin.startswith("global:"))
    out = []
    for lesson in global_lessons(ws):
        foreign = sorted(p for p in lesson.get("projects", {}) if p != project)
        if not foreign:
            continue
        origin = f"global:{lesson['category']}--{lesson['failure_class']}"
        for role in lesson.get("roles", []):
            if (role, origin) in have:
                continue
            synced += 1
            overlay = LessonOverlay(
                id=f"ovl-{role}-g{synced:04d}",
                role=role,
                lesson=lesson.get("lesson", ""),
                relevance=1.0,
                decay_halflife_iterations=halflife,
                reopen_criteria=f"failure class {lesson['failure_class']!r} recurs",
                source_issues=[],
                failure_class=lesson["failure_class"],
                category=lesson["category"],
                anchor_iteration=ws.iteration,
                origin=origin,
            )
            ws.commit("memory-update", [("overlays", overlay.id, overlay.to_dict())], refs=[overlay.id],
                      payload={"op": "overlay-sync", "role": role, "projects": foreign})
            out.append(overlay)
    return out
