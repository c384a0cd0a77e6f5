import numpy as np
import pytest
from hypothesis import settings

from decbilevel import SyntheticQuadratic, build_consensus_matrix
from decbilevel.topology import complete_graph

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def k5():
    """Complete graph on five agents; lambda = 1/3."""
    return build_consensus_matrix(complete_graph(5))


@pytest.fixture(scope="session")
def small_problem():
    return SyntheticQuadratic.generate(3, 3, 6, 4, 5)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report():
    """Record one pass/fail line for an acceptance criterion."""

    def _report(name: str, ok: bool, detail: str) -> bool:
        line = f"{name} {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
