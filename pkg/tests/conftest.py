import logging
import math

import numpy as np
import pytest

from oosdetect.cli import RunManifest
from oosdetect.netmodel import NetworkCase, load_case
from oosdetect.partition import make_partition
from oosdetect.simcore import Scenario, simulate

logging.getLogger("oosdetect").setLevel(logging.ERROR)


def _case(d: dict) -> NetworkCase:
    return NetworkCase.from_dict(d)


@pytest.fixture(scope="session")
def ieee39():
    return load_case("ieee39")


@pytest.fixture(scope="session")
def two_bus():
    """Single lossless line x = 0.5 between two generator buses."""
    return _case({
        "name": "two-bus", "slack_bus": 2,
        "buses": [{"id": 1}, {"id": 2}],
        "branches": [{"from": 1, "to": 2, "r": 0.0, "x": 0.5}],
        "generators": [{"bus": 1, "H": 5.0, "xd_prime": 0.2, "p": 0.0},
                       {"bus": 2, "H": 5.0, "xd_prime": 0.2, "p": 0.0}],
        "loads": [],
    })


@pytest.fixture(scope="session")
def two_machine():
    return load_case("twomachine")


@pytest.fixture(scope="session")
def four_bus():
    """Generators at buses 1 and 4, impedance loads at buses 2 and 3, one tie 2-3."""
    return _case({
        "name": "four-bus", "slack_bus": 4,
        "buses": [{"id": 1}, {"id": 2, "gs": 0.01, "bs": 0.02}, {"id": 3}, {"id": 4}],
        "branches": [
            {"from": 1, "to": 2, "r": 0.01, "x": 0.1, "b": 0.02},
            {"from": 2, "to": 3, "r": 0.02, "x": 0.25, "b": 0.04},
            {"from": 3, "to": 4, "r": 0.01, "x": 0.12, "b": 0.02, "tap": 1.02},
        ],
        "generators": [{"bus": 1, "H": 4.0, "xd_prime": 0.15, "p": 1.2},
                       {"bus": 4, "H": 30.0, "xd_prime": 0.05, "p": 0.6}],
        "loads": [{"bus": 2, "p": 0.9, "q": 0.3}, {"bus": 3, "p": 0.8, "q": 0.2}],
    })


@pytest.fixture(scope="session")
def manifests():
    return {k: RunManifest.from_file(f"manifest_{k}.json") for k in ("mode1", "mode2", "stable")}


@pytest.fixture(scope="session")
def runs(manifests):
    """Simulated trajectories of the bundled scenarios (computed once)."""
    return {k: simulate(m.scenario, m.load_case()) for k, m in manifests.items()}


@pytest.fixture(scope="session")
def pairs(ieee39, manifests):
    """Named (partition, cutset) pairs for every cutset in the bundled manifests."""
    out = {}
    for m in manifests.values():
        for cc in m.cutsets:
            out[cc.name] = make_partition(ieee39, cc.leading, cc.lines, cc.name)
    return out


def rng(seed=0):
    return np.random.default_rng(seed)


TWO_PI = 2 * math.pi


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record and print one pass/fail line per acceptance criterion."""
    def emit(n: int, ok: bool, detail: str) -> bool:
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return emit


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
