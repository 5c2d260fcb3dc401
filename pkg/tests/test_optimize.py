import itertools
import math

import numpy as np
import pytest

import oracles
from conftest import reference_cost, reference_model, reference_params, tiny_model
from goodwill.errors import EnumerationCapExceeded, EpsilonNotAligned
from goodwill.model import ControlSignal, QuadraticControlCost, build_model
from goodwill.optimize import (
    QUANTITIES,
    convergence_study,
    fit_loglog,
    spike_descent,
    tree_oracle,
    worst_constant_control,
)
from goodwill.paths import tree_brownian

# -- tree oracle ------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_oracle():
    return tree_oracle(tiny_model(), 4)


def test_oracle_matches_independent_recursion(tiny_oracle):
    assert tiny_oracle.enumerated == 16
    assert tiny_oracle.best_control == oracles.TINY_BEST_CONTROL
    assert tiny_oracle.best_cost == pytest.approx(oracles.TINY_BEST_COST, abs=1e-12)
    for seq in itertools.product((0.0, 1.0), repeat=4):
        assert tiny_oracle.costs[seq] == pytest.approx(oracles.tiny_tree_cost(seq), abs=1e-12)


def test_oracle_zero_gain_picks_zero_control():
    # without drift gain any advertising is pure cost
    m = build_model(reference_params(b0=0.0, sigma2=0.0), [0, 1], reference_cost(), dt=0.25)
    res = tree_oracle(m, 4)
    assert res.best_control == (0.0, 0.0, 0.0, 0.0)
    zero_cost = res.costs[(0.0,) * 4]
    assert all(c > zero_cost for s, c in res.costs.items() if any(s))


def test_oracle_independent_of_U_order():
    a = tree_oracle(tiny_model(), 4)
    b = tree_oracle(reference_model(dt=0.25, U=(1, 0),
                                    cost=reference_cost(c=QuadraticControlCost(1.5, 0.0))), 4)
    assert a.best_control == b.best_control and a.best_cost == b.best_cost
    assert a.costs == b.costs


def test_oracle_bit_for_bit(tiny_oracle):
    again = tree_oracle(tiny_model(), 4)
    assert again.best_cost == tiny_oracle.best_cost


def test_oracle_strict_improvements(tiny_oracle):
    rows = tiny_oracle.strict_improvements()
    assert len(rows) == 4  # every single flip of the optimum is worse
    assert all(r[2] > 0 for r in rows)


def test_oracle_limits():
    with pytest.raises(EnumerationCapExceeded):
        tree_oracle(tiny_model(), 4, enumeration_cap=100)
    with pytest.raises(ValueError):
        tree_oracle(tiny_model(), 7)


# -- spike descent ----------------------------------------------------------


def test_descent_from_optimum_stops_at_once():
    m = tiny_model()
    B = tree_brownian(m.grid)
    u = ControlSignal(m.grid, np.array(oracles.TINY_BEST_CONTROL))
    res = spike_descent(m, u, B=B, eps_init=0.25)
    assert res.stop_reason == "no_violation"
    assert res.accepted_spikes == [] and len(res.cost_trace) == 1


def test_descent_singleton_U():
    m = reference_model(dt=0.25, U=(1,))
    B = tree_brownian(m.grid)
    res = spike_descent(m, ControlSignal.constant(m.grid, 1.0), B=B)
    assert res.stop_reason == "no_violation" and res.accepted_spikes == []


def test_descent_reaches_oracle_from_worst_constant(tiny_oracle):
    m = tiny_model()
    B = tree_brownian(m.grid)
    u0 = worst_constant_control(m, B)
    assert tuple(u0.values) == oracles.TINY_WORST_CONSTANT
    res = spike_descent(m, u0, B=B, eps_init=0.25)
    assert res.stop_reason == "no_violation"
    assert tuple(res.control.values) == tiny_oracle.best_control
    assert res.cost_trace[-1].mean == pytest.approx(tiny_oracle.best_cost, abs=1e-12)
    means = [J.mean for J in res.cost_trace]
    assert all(b < a for a, b in zip(means, means[1:]))
    res.control.check_in(m.U)


def test_descent_budget_stop():
    m = tiny_model()
    B = tree_brownian(m.grid)
    res = spike_descent(m, ControlSignal.constant(m.grid, 0.0), B=B, eps_init=0.25, budget=1)
    assert res.stop_reason == "budget" and len(res.accepted_spikes) == 1


def test_descent_monte_carlo_trace_monotone(small_model):
    u0 = ControlSignal.constant(small_model.grid, 0.0)
    res = spike_descent(small_model, u0, budget=3, seed=4, n_paths=5_000)
    means = [J.mean for J in res.cost_trace]
    assert all(b < a for a, b in zip(means, means[1:]))
    res.control.check_in(small_model.U)
    assert len(res.trace_rows) == len(res.cost_trace)


# -- slope fits -------------------------------------------------------------


def test_fit_recovers_power_law():
    eps = [0.1, 0.05, 0.025, 0.0125]
    vals = [3.0 * e**1.5 for e in eps]
    fit = fit_loglog(eps, vals, [1e-3 * v for v in vals])
    assert fit.slope == pytest.approx(1.5, abs=1e-10)
    assert fit.intercept == pytest.approx(math.log(3.0), abs=1e-10)
    assert fit.lower < 1.5 < fit.upper


def test_fit_identically_zero_and_errors():
    fit = fit_loglog([0.1, 0.05], [0.0, 1e-40], [0.0, 0.0], zero_floor=1e-30)
    assert fit.identically_zero and fit.slope == math.inf
    with pytest.raises(ValueError):
        fit_loglog([0.1, 0.05], [1.0, -1.0], [0.1, 0.1])


def test_fit_inflates_stderr_for_scatter():
    eps = [0.1, 0.05, 0.025, 0.0125]
    vals = [e * (1.2 if k % 2 else 0.8) for k, e in enumerate(eps)]
    tight = fit_loglog(eps, vals, [1e-6 * v for v in vals])
    assert tight.slope_stderr > 0.05


def test_convergence_epsilon_checks(small_model):
    u = ControlSignal.constant(small_model.grid, 1.0)
    with pytest.raises(EpsilonNotAligned):
        convergence_study(small_model, u, 0.2, 0.0, [0.4, 0.2, 0.1], 100, 0)
    with pytest.raises(EpsilonNotAligned):
        convergence_study(small_model, u, 0.2, 0.0, [0.2, 0.15, 0.1, 0.05], 100, 0)
    with pytest.raises(EpsilonNotAligned):
        convergence_study(small_model, u, 0.2, 0.0, [0.4, 0.2, 0.1, 0.03], 100, 0)


def test_convergence_study_shape_and_reproducibility():
    m = reference_model(dt=0.025)
    u = ControlSignal.constant(m.grid, 1.0)
    eps = [0.2, 0.1, 0.05, 0.025]
    a = convergence_study(m, u, 0.2, 0.0, eps, 4_000, 3)
    b = convergence_study(m, u, 0.2, 0.0, eps, 4_000, 3, workers=4)
    assert set(a.quantities) == set(QUANTITIES)
    for name in QUANTITIES:
        assert a.quantities[name] == b.quantities[name]
    # linear state: the second remainder is zero to rounding
    assert a.quantities["sup_rem2"].identically_zero
    assert abs(a.quantities["sup_rem1"].slope - 2.0) < 0.3
