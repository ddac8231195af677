from __future__ import annotations

from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

from harness import fixtures
from harness.store import Workspace

settings.register_profile(
    "harness",
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("harness")


@pytest.fixture
def ws(tmp_path: Path):
    w = Workspace.init(tmp_path / "ws", fsync=False)
    yield w
    w.close()


@pytest.fixture(scope="session")
def built(tmp_path_factory) -> Path:
    out = tmp_path_factory.mktemp("fixtures") / "out"
    fixtures.build_fixtures(out)
    return out


def open_all(root: Path) -> list[Workspace]:
    return [Workspace.open(p, readonly=True) for p in sorted(root.iterdir()) if (p / "workspace.json").is_file()]


ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one acceptance line from a list of (name, ok, observed) sub-checks, then assert."""

    def record(n: int, title: str, checks: list[tuple[str, bool, object]]) -> None:
        failed = [f"{name} (observed {obs})" for name, ok, obs in checks if not ok]
        status = "PASS" if not failed else "FAIL"
        line = f"criterion {n:>2}: {status}  {title}"
        if failed:
            line += "  | failed: " + "; ".join(failed)
        ACCEPTANCE[n] = line
        print(line)
        assert not failed, line

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
