from __future__ import annotations

import pytest

from contractlab.model import ModelParams, figure_one_params, toy_pool
from contractlab.pure_moral_hazard import solve_pmh_all


def ten_loan_pool() -> ModelParams:
    alpha = tuple(0.06 - 0.002 * k for k in range(10))
    return ModelParams(I=10, mu=0.1, B=0.002, eps=0.25, r=0.02, alpha=alpha, rho_g=2.0, rho_b=1.0)


@pytest.fixture(scope="session")
def fig1() -> ModelParams:
    return figure_one_params()


@pytest.fixture(scope="session")
def toy2() -> ModelParams:
    return toy_pool(2)


@pytest.fixture(scope="session")
def toy3() -> ModelParams:
    return toy_pool(3)


@pytest.fixture(scope="session")
def pmh3(toy3):
    return solve_pmh_all(toy3)


@pytest.fixture(scope="session")
def pmh_fig1(fig1):
    return solve_pmh_all(fig1)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line per acceptance criterion; all lines are repeated in the summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
