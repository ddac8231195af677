from __future__ import annotations

import json

import pytest

from harness import fixtures
from harness.fixtures import FixtureManifest
from harness.store import WorkspaceError


def test_manifests_cite_sources(built):
    data = json.loads((built / "manifest.json").read_text())
    names = {m["name"] for m in data}
    assert {"conversion-events", "recovered-failures", "stage-transitions", "review-action",
            "evolution-digest", "scenarios"} <= names
    for m in data:
        assert m["source_citation"] and m["provenance"] in fixtures.PROVENANCE
        for f in m["files"]:
            assert (built / f).exists()


def test_manifest_requires_citation():
    with pytest.raises(ValueError):
        FixtureManifest("x", "constructed", "", [])
    with pytest.raises(ValueError):
        FixtureManifest("x", "invented", "y", [])


def test_build_refuses_existing_dir(built):
    with pytest.raises(WorkspaceError):
        fixtures.build_fixtures(built)


def test_euler_decomposition_uses_every_edge():
    counts = {**fixtures.TRANSITION_COUNTS, **fixtures.TRANSITION_FILLERS}
    traces = fixtures.euler_traces(counts, fixtures.TRACE_STARTS, fixtures.TRACE_END)
    used: dict = {}
    for t in traces:
        assert t[-1] == fixtures.TRACE_END
        for a, b in zip(t, t[1:]):
            used[(a, b)] = used.get((a, b), 0) + 1
    assert used == counts
    assert sorted(t[0] for t in traces) == sorted(fixtures.TRACE_STARTS)


def test_fillers_stay_below_published_cells():
    assert max(fixtures.TRANSITION_FILLERS.values()) < min(fixtures.TRANSITION_COUNTS.values())


def test_spread():
    assert fixtures.spread(87, 10) == [9] * 7 + [8] * 3
    assert sum(fixtures.spread(42, 11)) == 42


def test_digest_stream_shape():
    stream = fixtures.digest_stream()
    issues = {(i["category"], i["failure_class"]) for r in stream["reflections"] for i in r["issues"]}
    assert len(issues) == sum(fixtures.DIGEST_COUNTS.values()) + fixtures.DIGEST_SINGLETONS


def test_scenario_files_load(built):
    from harness.scenario import load_scenario

    for p in sorted((built / "scenarios").glob("*.json")):
        assert load_scenario(p).name == p.stem
