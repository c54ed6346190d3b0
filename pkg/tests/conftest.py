import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

DATA = Path(__file__).parent / "data"


@pytest.fixture
def fixture_path():
    return DATA / "two_agents.json"


@pytest.fixture(scope="session")
def small_scenario():
    from coopsim.scenario import generate_synthetic

    return generate_synthetic({"n_frames": 70, "n_agents": 8, "n_cavs": 3}, seed=0)


@pytest.fixture(scope="session")
def run_small(small_scenario):
    """Memoised ``run`` on the small scenario, keyed on the config overrides."""
    import json

    from coopsim.pipeline import RunConfig, run

    cache = {}

    def go(**over):
        key = json.dumps(over, sort_keys=True)
        if key not in cache:
            cache[key] = run(small_scenario, RunConfig.from_dict(over))
        return cache[key]

    return go


# -- acceptance criterion lines --------------------------------------------------

CRITERIA = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[CRITERIA] = {}


@pytest.fixture
def criterion(request):
    """``criterion(n, name, ok, detail)`` records one PASS/FAIL line and asserts ``ok``."""
    lines = request.config.stash[CRITERIA]
    seen = []

    def record(n: int, name: str, ok: bool, detail: str):
        seen.append(n)
        lines[n] = f"{'PASS' if ok else 'FAIL'}  criterion {n} ({name}): {detail}"
        assert ok, detail

    yield record
    if not seen:
        lines.setdefault(request.node.name, f"FAIL  {request.node.name}: did not reach its check")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(CRITERIA, {})
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(lines, key=lambda k: (isinstance(k, str), str(k).zfill(3))):
        terminalreporter.write_line(lines[key])
