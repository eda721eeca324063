import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from hwnet.fluid import solve_fluid  # noqa: E402
from hwnet.networks import m_network, n_network, single_class  # noqa: E402


@pytest.fixture(scope="session")
def nnet():
    topo, limit = n_network()
    return topo, limit, solve_fluid(topo, limit)


@pytest.fixture(scope="session")
def mnet():
    topo, limit = m_network()
    return topo, limit, solve_fluid(topo, limit)


@pytest.fixture(scope="session")
def mmn():
    topo, limit = single_class()
    return topo, limit, solve_fluid(topo, limit)


def pytest_configure(config):
    config._acceptance_lines = []


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line per acceptance criterion for the terminal summary."""
    lines = request.config._acceptance_lines

    def record(number, ok, text):
        lines.append(f"ACCEPTANCE {number:>2} [{'PASS' if ok else 'FAIL'}] {text}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
