import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from goodwill.model import (  # noqa: E402
    ControlSignal,
    CostSpec,
    LinearReward,
    ModelParams,
    QuadraticControlCost,
    QuadraticReward,
    build_model,
)

# criterion -> (passed, detail); filled by test_acceptance, printed at the end
ACCEPTANCE: dict = {}


def reference_params(**kw):
    base = dict(a0=1.0, ad=0.5, b0=2.0, sigma1=0.2, sigma2=0.3, delay_d=0.5,
                horizon_T=1.0, history=1.0)
    base.update(kw)
    return ModelParams(**base)


def reference_cost(**kw):
    base = dict(c=QuadraticControlCost(1.0, 0.0), l=QuadraticReward(0.2, 0.1),
                r=QuadraticReward(1.0, 0.5), operating_interval=(-1.0, 10.0))
    base.update(kw)
    return CostSpec(**base)


def reference_model(dt=0.0125, params=None, cost=None, U=(0, 1)):
    return build_model(params or reference_params(), list(U), cost or reference_cost(), dt=dt)


def linear_terminal_cost():
    """l = 0, r(x) = x."""
    return CostSpec(c=QuadraticControlCost(1.0, 0.0), l=LinearReward(0.0), r=LinearReward(1.0),
                    operating_interval=(-10.0, 10.0))


def tiny_model():
    return reference_model(dt=0.25, cost=reference_cost(c=QuadraticControlCost(1.5, 0.0)))


@pytest.fixture(scope="session")
def ref_model():
    return reference_model()


@pytest.fixture(scope="session")
def small_model():
    """Reference model on a coarse grid for quick tests."""
    return reference_model(dt=0.05)


@pytest.fixture(scope="session")
def tiny():
    return tiny_model()


@pytest.fixture
def unit_control():
    def make(model, level=1.0):
        return ControlSignal.constant(model.grid, level)
    return make


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k.split()[1])):
        passed, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {key}: {detail}")
