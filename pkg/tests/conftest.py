import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from gridswarm.network import build_network  # noqa: E402
from gridswarm.scenario import bundled_dir, parse_feeder  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def chain12():
    return parse_feeder(bundled_dir() / "chain12.json")


@pytest.fixture(scope="session")
def tree40():
    return parse_feeder(bundled_dir() / "tree40.json")


def chain(rs, xs, v0=1.0):
    lines = [(k, k + 1, r, x) for k, (r, x) in enumerate(zip(rs, xs))]
    return build_network(range(len(rs) + 1), lines, v0=v0)


# -- acceptance reporting ----------------------------------------------------

_CRITERIA = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call":
        return
    detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    _CRITERIA.append((mark.args[0], item.name, "PASS" if rep.passed else "FAIL", detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n, name, status, detail in sorted(_CRITERIA):
        terminalreporter.write_line(f"criterion {n}: {status}  {name}  {detail}")
