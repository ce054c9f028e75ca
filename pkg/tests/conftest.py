import sys

import numpy as np
import pytest

from dpm.grid import GridSpec
from dpm.solver import FluidState, init_isotropic


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def grid8():
    return GridSpec(8)


@pytest.fixture
def grid16():
    return GridSpec(16)


def turbulent_state(n: int = 16, seed: int = 3, urms: float = 1.0, nu: float = 0.02) -> FluidState:
    return init_isotropic(GridSpec(n), urms, min(3.0, n / 4), seed, nu)


@pytest.fixture
def state16():
    return turbulent_state(16)


@pytest.fixture
def state8():
    return turbulent_state(8, seed=5)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    report = getattr(mod, "REPORT", None)
    if not report:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(report):
        ok, detail = report[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
