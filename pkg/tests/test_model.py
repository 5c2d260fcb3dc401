import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import reference_cost, reference_params
from goodwill.errors import (
    DelayExceedsHorizon,
    DelayNotGridAligned,
    EmptyControlSet,
    ExcessiveRewardGrowth,
    NonConvexCost,
    NonIncreasingTerminalReward,
    NonPositiveDelay,
    TabulatedCostOffGrid,
    WindowNotAligned,
    WindowOutOfRange,
)
from goodwill.model import (
    ControlSet,
    ControlSignal,
    CostSpec,
    LinearReward,
    ModelParams,
    QuadraticControlCost,
    QuadraticReward,
    SaturatingReward,
    SpikeSpec,
    TabulatedControlCost,
    TimeGrid,
    apply_spike,
    build_model,
    delayed_delta,
    eval_cost,
    spike_delta,
    validate_model,
)


def test_reference_model_validates():
    m = build_model(reference_params(), [0, 1], reference_cost(), dt=0.05)
    assert m.m == 10 and m.N == 20
    assert m.history.shape == (11,)
    assert not m.history.flags.writeable


def test_delay_not_grid_aligned():
    with pytest.raises(DelayNotGridAligned) as exc:
        build_model(reference_params(), [0, 1], reference_cost(), dt=0.04)
    assert exc.value.hypothesis == "grid-aligned delay"


def test_empty_control_set():
    with pytest.raises(EmptyControlSet):
        ControlSet([])


def test_duplicate_levels_rejected():
    with pytest.raises(ValueError):
        ControlSet([0, 1, 1])


def test_nonpositive_delay():
    grid = TimeGrid(dt=0.1, n_steps=10, delay_steps=1)
    with pytest.raises(NonPositiveDelay):
        validate_model(reference_params(delay_d=-1.0), ControlSet([0, 1]), reference_cost(), grid)


def test_delay_must_be_shorter_than_horizon():
    with pytest.raises(DelayExceedsHorizon):
        build_model(reference_params(delay_d=1.0), [0, 1], reference_cost(), dt=0.1)


def test_nonconvex_tabulated_cost():
    cost = reference_cost(c=TabulatedControlCost({0: 0.0, 1: 2.0, 2: 2.0}))
    with pytest.raises(NonConvexCost):
        build_model(reference_params(), [0, 1, 2], cost, dt=0.05)


def test_concave_quadratic_cost_rejected():
    cost = reference_cost(c=QuadraticControlCost(-1.0, 0.0))
    with pytest.raises(NonConvexCost):
        build_model(reference_params(), [0, 1], cost, dt=0.05)


def test_decreasing_terminal_reward_rejected():
    cost = reference_cost(r=QuadraticReward(0.0, 1.0), operating_interval=(-1.0, 1.0))
    with pytest.raises(NonIncreasingTerminalReward):
        build_model(reference_params(), [0, 1], cost, dt=0.05)


def test_reward_growth_bound():
    cost = reference_cost(l=QuadraticReward(0.0, 100.0), growth_bound=10.0)
    with pytest.raises(ExcessiveRewardGrowth):
        build_model(reference_params(), [0, 1], cost, dt=0.05)


def test_eval_cost_examples():
    cost = CostSpec(c=QuadraticControlCost(1.0, 0.0), l=QuadraticReward(0.0, 1.0),
                    r=LinearReward(1.0))
    assert eval_cost(cost, "c", 1.0) == 1.0
    assert eval_cost(cost, "r_xx", 3.7) == 0.0
    assert eval_cost(cost, "l_xx", -2.0) == 1.0
    assert eval_cost(cost, "l_x", -2.0) == -2.0
    with pytest.raises(ValueError):
        eval_cost(cost, "q", 0.0)


def test_tabulated_cost_off_grid():
    c = TabulatedControlCost({0: 0.0, 1: 1.0})
    assert c(1.0) == 1.0
    with pytest.raises(TabulatedCostOffGrid):
        c(0.5)


def test_saturating_reward_derivatives():
    r = SaturatingReward(2.0, 0.5)
    x, h = 0.3, 1e-5
    assert abs((r.value(x + h) - r.value(x - h)) / (2 * h) - r.dx(x)) < 1e-8
    assert abs((r.dx(x + h) - r.dx(x - h)) / (2 * h) - r.dxx(x)) < 1e-8


def test_history_sequence_mapping():
    p = ModelParams(1, 0.5, 2, 0, 0, 0.5, 1.0, history=(3.0, 2.0, 1.0))
    grid = TimeGrid.build(0.125, 1.0, 0.5)
    h = p.history_on(grid)
    # nodes -0.5, -0.375, -0.25, -0.125, 0 over samples at -0.5, -0.25, 0
    assert h.tolist() == [3.0, 3.0, 2.0, 2.0, 1.0]


# -- spikes -----------------------------------------------------------------

def grid05():
    return TimeGrid.build(0.05, 1.0, 0.5)


def test_apply_spike_on_window():
    g = grid05()
    u = ControlSignal.constant(g, 0.0)
    ue = apply_spike(u, SpikeSpec(0.2, 0.05, 1.0))
    assert ue.values[4] == 1.0
    assert ue.values.sum() == 1.0


def test_spike_identity_when_v_equals_u():
    g = grid05()
    u = ControlSignal.constant(g, 1.0)
    sp = SpikeSpec(0.3, 0.2, 1.0)
    assert np.array_equal(apply_spike(u, sp).values, u.values)
    assert not spike_delta(u, sp).any()


def test_delayed_spike_past_horizon_vanishes():
    g = grid05()
    u = ControlSignal.constant(g, 1.0)
    du = spike_delta(u, SpikeSpec(0.9, 0.1, 0.0))
    assert du.sum() == 2.0
    assert not delayed_delta(du, g).any()


def test_spike_errors():
    g = grid05()
    u = ControlSignal.constant(g, 1.0)
    with pytest.raises(WindowOutOfRange):
        apply_spike(u, SpikeSpec(0.95, 0.1, 0.0))
    with pytest.raises(WindowNotAligned):
        apply_spike(u, SpikeSpec(0.2, 0.03, 0.0))


def test_control_must_lie_in_U():
    g = grid05()
    u = ControlSignal.constant(g, 0.5)
    with pytest.raises(ValueError):
        u.check_in(ControlSet([0, 1]))


@settings(max_examples=60, deadline=None)
@given(levels=st.lists(st.sampled_from([0.0, 1.0, 2.0]), min_size=20, max_size=20),
       k0=st.integers(0, 19), width=st.integers(1, 20), v=st.sampled_from([0.0, 1.0, 2.0]))
def test_spike_stays_in_U_and_is_idempotent(levels, k0, width, v):
    g = TimeGrid.build(0.05, 1.0, 0.5)
    width = min(width, 20 - k0)
    U = ControlSet([0.0, 1.0, 2.0])
    u = ControlSignal(g, np.array(levels))
    sp = SpikeSpec(k0 * 0.05, width * 0.05, v)
    ue = apply_spike(u, sp)
    ue.check_in(U)
    assert np.array_equal(apply_spike(ue, sp).values, ue.values)
    du = spike_delta(u, sp)
    assert np.array_equal(u.values - du, ue.values)


@settings(max_examples=40, deadline=None)
@given(U=st.lists(st.integers(-5, 5), min_size=1, max_size=6, unique=True),
       alpha=st.floats(0, 3), beta=st.floats(-2, 2))
def test_convex_quadratic_always_accepted(U, alpha, beta):
    cost = reference_cost(c=QuadraticControlCost(alpha, beta))
    build_model(reference_params(), U, cost, dt=0.1)
