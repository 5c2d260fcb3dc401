import math
import warnings

import numpy as np
import pytest

import oracles
from conftest import linear_terminal_cost, reference_cost, reference_params
from goodwill.adjoint import (
    bsde_residuals,
    condexp_regress,
    estimate_martingale_repr,
    estimate_second_adjoint,
    group_mean,
    second_adjoint_targets,
    solve_first_adjoint,
)
from goodwill.errors import (
    BudgetExceeded,
    RankDeficientBasis,
    RegressionQualityBelowFloor,
    StartOffGrid,
)
from goodwill.model import (
    ControlSignal,
    CostSpec,
    LinearReward,
    QuadraticControlCost,
    QuadraticReward,
    TimeGrid,
    build_model,
)
from goodwill.paths import mc_stats, sample_brownian, simulate_state, tree_brownian

# -- regression -------------------------------------------------------------


def test_constant_target():
    rng = np.random.default_rng(0)
    F = rng.normal(size=(500, 2))
    pred = condexp_regress(F, np.full(500, 3.7))
    assert np.allclose(pred.predict(F), 3.7)
    assert pred.r2[0] == 1.0


def test_linear_target_coefficient():
    rng = np.random.default_rng(1)
    x = rng.normal(size=2000)
    y = 2 * x + 1e-6 * rng.normal(size=2000)
    pred = condexp_regress(x, y, basis_degree=1)
    assert abs(pred.coef[1] - 2.0) < 1e-3


def test_pure_noise_has_low_r2():
    rng = np.random.default_rng(2)
    F = rng.normal(size=(100_000, 2))
    pred = condexp_regress(F, rng.normal(size=100_000))
    assert pred.r2[0] < 0.05


def test_too_few_samples():
    with pytest.raises(ValueError):
        condexp_regress(np.arange(20.0)[:, None], np.arange(20.0), basis_degree=2)


def test_rank_deficient_basis_flags_and_ridges():
    rng = np.random.default_rng(3)
    x = rng.normal(size=400)
    F = np.column_stack([x, 2 * x])  # collinear
    with pytest.warns(RankDeficientBasis):
        pred = condexp_regress(F, x, basis_degree=1)
    assert pred.rank_deficient
    assert np.allclose(pred.predict(F), x, atol=1e-4)


def test_group_mean():
    ids = np.array([0, 1, 0, 1])
    assert group_mean(ids, np.array([1.0, 2.0, 3.0, 6.0])).tolist() == [2.0, 4.0, 2.0, 4.0]


# -- martingale representation ---------------------------------------------


@pytest.fixture(scope="module")
def repr_batch():
    return sample_brownian(TimeGrid.build(0.05, 1.0, 0.5), 100_000, 21)


def test_repr_of_W1(repr_batch):
    B = repr_batch
    target = B.W1()[-1]
    R = estimate_martingale_repr(B, target, (0.0, 1.0))
    for j in (0, 7, 19):
        raw1 = target * B.dW1[j] / B.grid.dt
        raw2 = target * B.dW2[j] / B.grid.dt
        se1 = raw1.std() / math.sqrt(B.n_paths)
        se2 = raw2.std() / math.sqrt(B.n_paths)
        assert abs(R.L1[j].mean() - 1.0) <= 3 * se1
        assert abs(R.L2[j].mean()) <= 3 * se2


def test_repr_of_W1_squared(repr_batch):
    B = repr_batch
    target = B.W1()[-1] ** 2
    R = estimate_martingale_repr(B, target, (0.0, 1.0))
    j = 10
    W = B.W1()[j]
    slope = np.polyfit(W, R.L1[j], 1)[0]
    assert abs(slope - 2.0) <= 0.1


def test_repr_of_constant_and_running(repr_batch):
    B = repr_batch
    k = B.grid.index_of(0.5)
    running = np.ones((k + 1, B.n_paths))
    R = estimate_martingale_repr(B, np.full(B.n_paths, 2.0), (0.0, 0.5), running=running)
    raw = 2.0 * B.dW1[0] / B.grid.dt
    tol = 3 * raw.std() / math.sqrt(B.n_paths)
    assert np.abs(R.L1.mean(axis=1)).max() <= tol
    assert R.K1.shape == (k + 1, k, B.n_paths)
    assert not R.K1[0].any()  # no integrand before s = t0


def test_repr_window_errors(repr_batch):
    with pytest.raises(StartOffGrid):
        estimate_martingale_repr(repr_batch, np.zeros(repr_batch.n_paths), (0.5, 0.5))


def test_repr_exact_on_tree():
    g = TimeGrid.build(0.25, 1.0, 0.5)
    B = tree_brownian(g)
    R = estimate_martingale_repr(B, B.W1()[-1], (0.0, 1.0))
    assert np.allclose(R.L1, 1.0) and np.allclose(R.L2, 0.0)


# -- first adjoint ----------------------------------------------------------


def linear_model(dt=0.05, **kw):
    return build_model(reference_params(**kw), [0, 1], linear_terminal_cost(), dt=dt)


def test_constant_terminal_datum_gives_unit_adjoint():
    m = linear_model(a0=0.0, ad=0.0)
    u = ControlSignal.constant(m.grid, 1.0)
    S = simulate_state(m, u, sample_brownian(m.grid, 20_000, 2))
    A = solve_first_adjoint(m, S)
    # p = 1 up to the sigma1 q1 feedback of regression noise
    assert np.abs(A.p[: m.N + 1].mean(axis=1) - 1.0).max() < 2e-3
    B = S.driver
    for i in range(m.N):
        for q, dW in ((A.q1, B.dW1), (A.q2, B.dW2)):
            se = (A.p[i + 1] * dW[i] / m.dt).std() / math.sqrt(B.n_paths)
            assert abs(q[i].mean()) <= 3 * se + 1e-12


def test_exponential_adjoint_and_structure():
    m = linear_model(ad=0.0)
    u = ControlSignal.constant(m.grid, 1.0)
    S = simulate_state(m, u, sample_brownian(m.grid, 20_000, 3))
    A = solve_first_adjoint(m, S)
    exact = np.array([oracles.adjoint_linear_terminal(1.0, 1.0, t) for t in m.grid.times])
    assert np.allclose(A.p[: m.N + 1].mean(axis=1), exact, rtol=0.03)
    # future-time conditions and terminal value, exactly
    assert not A.p[m.N + 1:].any() and not A.q1[m.N:].any() and not A.q2[m.N:].any()
    assert np.array_equal(A.p[m.N], m.cost.r.dx(S.terminal))
    # the interval views share their boundary nodes
    for k in range(1, len(A.intervals)):
        assert np.array_equal(A.interval_values(k)[-1], A.interval_values(k - 1)[0])


def test_sigma2_zero_gives_null_q2():
    m = build_model(reference_params(sigma2=0.0), [0, 1], reference_cost(), dt=0.05)
    u = ControlSignal.constant(m.grid, 1.0)
    B = sample_brownian(m.grid, 50_000, 4)
    A = solve_first_adjoint(m, simulate_state(m, u, B))
    z = []
    for i in range(m.N):
        target = A.p[i + 1] * B.dW2[i] / m.dt
        z.append(abs(A.q2[i].mean()) / (target.std() / math.sqrt(B.n_paths)))
    assert np.mean(np.array(z) <= 3) >= 0.95


def test_adjoint_on_tree_is_exact_average():
    m = build_model(reference_params(), [0, 1], reference_cost(), dt=0.25)
    u = ControlSignal.constant(m.grid, 1.0)
    S = simulate_state(m, u, tree_brownian(m.grid))
    A = solve_first_adjoint(m, S)
    assert A.diagnostics["exact"] and np.all(A.diagnostics["r2"] == 1.0)
    assert np.isfinite(A.p).all()


def test_r2_floor_flags_interval(small_model):
    u = ControlSignal.constant(small_model.grid, 1.0)
    S = simulate_state(small_model, u, sample_brownian(small_model.grid, 5_000, 5))
    with pytest.warns(RegressionQualityBelowFloor):
        A = solve_first_adjoint(small_model, S, r2_floor=0.9999)
    assert any(d["flagged"] for d in A.diagnostics["intervals"])


def test_unknown_driver(small_model):
    u = ControlSignal.constant(small_model.grid, 1.0)
    S = simulate_state(small_model, u, sample_brownian(small_model.grid, 500, 5))
    with pytest.raises(ValueError):
        solve_first_adjoint(small_model, S, driver="other")


def test_bsde_residuals_out_of_sample(small_model):
    u = ControlSignal.constant(small_model.grid, 1.0)
    S = simulate_state(small_model, u, sample_brownian(small_model.grid, 40_000, 6))
    A = solve_first_adjoint(small_model, S)
    Sv = simulate_state(small_model, u, sample_brownian(small_model.grid, 10_000, 6, stream=1))
    res = bsde_residuals(small_model, A, Sv)
    assert res["z"].shape == (small_model.N,)
    assert np.mean(res["z"] <= 3) >= 0.9


# -- second adjoint ---------------------------------------------------------


def test_degenerate_P_is_exactly_zero(small_model):
    m = build_model(small_model.params, [0, 1], linear_terminal_cost(), dt=0.05)
    u = ControlSignal.constant(m.grid, 1.0)
    S = simulate_state(m, u, sample_brownian(m.grid, 200, 0))
    for method in ("nested", "regression"):
        est = estimate_second_adjoint(m, S, 0.3, n_inner=5, method=method)
        assert est.mean == 0.0 and not est.values.any()
    assert not second_adjoint_targets(m, S, 3).any()


def square_reward_model(sigma1, dt=0.05):
    cost = CostSpec(c=QuadraticControlCost(1.0, 0.0), l=LinearReward(0.0),
                    r=QuadraticReward(0.0, 2.0), operating_interval=(0.01, 10.0))
    return build_model(reference_params(a0=0.0, ad=0.0, sigma1=sigma1), [0, 1], cost, dt=dt)


def test_constant_auxiliary_gives_P_two():
    m = square_reward_model(0.0)
    u = ControlSignal.constant(m.grid, 1.0)
    S = simulate_state(m, u, sample_brownian(m.grid, 100, 0))
    est = estimate_second_adjoint(m, S, 0.4, n_inner=3)
    assert np.allclose(est.values, 2.0)


def test_lognormal_P_small():
    m = square_reward_model(0.2)
    u = ControlSignal.constant(m.grid, 1.0)
    S = simulate_state(m, u, sample_brownian(m.grid, 2_000, 1))
    est = estimate_second_adjoint(m, S, 0.2, n_inner=50, seed=3)
    assert abs(est.mean - oracles.lognormal_P(0.2, 1.0, 0.2)) <= 3 * est.std_error


def test_nested_P_worker_invariant():
    m = square_reward_model(0.2)
    u = ControlSignal.constant(m.grid, 1.0)
    S = simulate_state(m, u, sample_brownian(m.grid, 3_000, 1))
    a = estimate_second_adjoint(m, S, 0.2, n_inner=100, workers=1)
    b = estimate_second_adjoint(m, S, 0.2, n_inner=100, workers=4)
    assert np.array_equal(a.values, b.values)


def test_nested_budget(small_model):
    u = ControlSignal.constant(small_model.grid, 1.0)
    S = simulate_state(small_model, u, sample_brownian(small_model.grid, 1000, 0))
    with pytest.raises(BudgetExceeded):
        estimate_second_adjoint(small_model, S, 0.2, n_inner=100, max_paths=10_000)
    with pytest.raises(StartOffGrid):
        estimate_second_adjoint(small_model, S, 0.123)


def test_regression_P_matches_nested(small_model):
    u = ControlSignal.constant(small_model.grid, 1.0)
    S = simulate_state(small_model, u, sample_brownian(small_model.grid, 20_000, 8))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        reg = estimate_second_adjoint(small_model, S, 0.5, method="regression")
        nest = estimate_second_adjoint(small_model, S, 0.5, n_inner=20, method="nested")
    pooled = math.hypot(reg.std_error, nest.std_error)
    assert abs(reg.mean - nest.mean) <= 4 * pooled + 0.02 * abs(nest.mean)
    mean, se = mc_stats(reg.values)
    assert abs(mean - reg.mean) < 1e-9 + 3 * se
