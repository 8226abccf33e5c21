from __future__ import annotations

import pytest

from teamgoals import data_path
from teamgoals.formats import load_environment, load_stimuli
from teamgoals.inference import QSourcePool, run_stimulus

from oracles import make_map


@pytest.fixture(scope="session")
def stimuli():
    return load_stimuli(data_path("stimuli"))


@pytest.fixture(scope="session")
def stimuli_by_id(stimuli):
    return {s.id: s for s in stimuli}


@pytest.fixture(scope="session")
def fig1_map():
    return load_environment(data_path("maps", "fig1.map"))


@pytest.fixture(scope="session")
def shared_pool():
    return QSourcePool()


@pytest.fixture(scope="session")
def dataset_traces(stimuli, shared_pool):
    """Model traces at T=1 for every bundled stimulus, keyed by mode."""
    out = {}
    for mode in ("with-instructions", "without-instructions", "instructions-only"):
        out[mode] = [run_stimulus(s, mode, pool=shared_pool) for s in stimuli]
    return out


@pytest.fixture
def corridor():
    """Principal two cells from the only gem in an open corridor; the assistant is out of the way."""
    return make_map(
        ["#######",
         "#h.1..#",
         "#....r#",
         "#######"],
        {"1": "red"},
    )


@pytest.fixture
def small_doors():
    """Gem behind a blue door; the blue key lies next to the assistant."""
    return make_map(
        ["#######",
         "#h.#1.#",
         "#..B..#",
         "#rb#..#",
         "#######"],
        {"1": "red", "B": "blue", "b": "blue"},
    )


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
