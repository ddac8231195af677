from __future__ import annotations

import json

import pytest

from harness.cli import main


def test_init_advance_and_env_override(tmp_path, monkeypatch, capsys):
    root = tmp_path / "w"
    monkeypatch.setenv("HARNESS_WORKSPACE", str(root))
    assert main(["init"]) == 0
    assert main(["advance"]) == 0
    assert capsys.readouterr().out.strip().endswith("0:planning")
    assert main(["advance", "--to", "writing"]) == 2


def test_plan_mutate_requires_cause(tmp_path, capsys):
    root = str(tmp_path / "w")
    main(["-w", root, "init"])
    with pytest.raises(SystemExit):
        main(["-w", root, "plan", "mutate", "--mutations", "[]"])
    rc = main(["-w", root, "plan", "mutate", "--cause", "art-0404", "--mutations",
               json.dumps([{"op": "add", "task": {"id": "a", "question": "q"}}])])
    assert rc == 2 and "does not resolve" in capsys.readouterr().err


def test_gate_run_blocks_without_review(tmp_path, capsys):
    root = str(tmp_path / "w")
    main(["-w", root, "init"])
    capsys.readouterr()
    assert main(["-w", root, "gate", "run", "--iteration", "0"]) == 1
    assert "missing-review" in capsys.readouterr().out


def test_run_report_and_audits(tmp_path, built, capsys):
    root = str(tmp_path / "run")
    assert main(["-w", root, "run", "--scenario", str(built / "scenarios" / "five-class.json")]) == 0
    assert (tmp_path / "run.injections.jsonl").is_file() and (tmp_path / "run.report.json").is_file()
    capsys.readouterr()
    assert main(["-w", root, "audit", "failures", "--format", "records"]) == 0
    rows = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
    assert len(rows) == 5 and all(r["converted"] for r in rows)
    assert main(["-w", root, "report", "--scenario", str(built / "scenarios" / "five-class.json")]) == 0
    assert main(["-w", root, "report"]) == 0
    assert main(["-w", root, "replay", "verify"]) == 0


def test_run_exit_code_reflects_outcomes(tmp_path, built):
    sc = json.loads((built / "scenarios" / "clean.json").read_text())
    sc["expected_outcomes"] = [{"type": "count", "what": "blocks", "value": 3}]
    p = tmp_path / "wrong.json"
    p.write_text(json.dumps(sc))
    assert main(["-w", str(tmp_path / "r"), "run", "--scenario", str(p)]) == 1


def test_audit_directories_of_workspaces(built, capsys):
    assert main(["audit", "transitions", str(built / "stage-transitions"), "--format", "records"]) == 0
    cells = {(r["from"], r["to"]): r["count"] for r in map(json.loads, capsys.readouterr().out.splitlines())}
    assert cells[("writing", "writing")] == 405
    assert main(["audit", "reviews", str(built / "review-action")]) == 0
    assert "no-prior" in capsys.readouterr().out


def test_inject_and_schedule(tmp_path, built, capsys):
    root = str(tmp_path / "run")
    main(["-w", root, "run", "--scenario", str(built / "scenarios" / "caching-pilot.json")])
    capsys.readouterr()
    assert main(["-w", root, "schedule", "--format", "records"]) == 0
    assert main(["-w", root, "inject", "remove-review-score", "--iteration", "1"]) == 0
    assert "art-" in capsys.readouterr().out
    plan = tmp_path / "plan.json"
    plan.write_text(json.dumps({"tasks": [{"id": "a", "question": "q"}, {"id": "b", "question": "q",
                                                                        "dependencies": ["a"]}]}))
    capsys.readouterr()
    assert main(["schedule", "--plan", str(plan)]) == 0
    assert capsys.readouterr().out.splitlines() == ["layer 0: a", "layer 1: b"]


def test_memory_and_evolve_commands(tmp_path, built, capsys):
    root = str(tmp_path / "w")
    main(["-w", root, "init"])
    assert main(["-w", root, "memory", "ingest", "--stream", str(built / "digest" / "stream.json")]) == 0
    capsys.readouterr()
    assert main(["-w", root, "memory", "digest", "--format", "records"]) == 0
    counts = {r["category"]: r["count"] for r in map(json.loads, capsys.readouterr().out.splitlines())}
    assert sum(counts.values()) == 416
    assert main(["-w", root, "evolve", "propose"]) == 0
    assert main(["-w", root, "claim", "check", "nope", "--usage", "headline"]) == 2


def test_fixtures_build(tmp_path, capsys):
    assert main(["fixtures", "build", "--out", str(tmp_path / "fx")]) == 0
    assert "conversion-events" in capsys.readouterr().out
    assert main(["fixtures", "build", "--out", str(tmp_path / "fx")]) == 2
