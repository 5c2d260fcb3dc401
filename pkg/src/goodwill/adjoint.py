"""First-order anticipated adjoint and second-order adjoint estimators.

Conditional expectations E[. | F_t] are least-squares projections on
polynomials of the state features (x(t), x(t - d)); on an enumerated
scenario tree they are exact node averages instead.

Sign convention for q follows the backward form

    p(t) = p(t + dt) + F(t) dt + q1(t) dW1 + q2(t) dW2,

so q^j(t) = -E[p(t + dt) dW^j | F_t] / dt.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from typing import Optional, Sequence

import numpy as np

from .errors import (
    BudgetExceeded,
    GridMismatch,
    RankDeficientBasis,
    RegressionQualityBelowFloor,
    StartOffGrid,
)
from .model import ValidatedModel
from .paths import BrownianBatch, StateBatch, aux_recursion, mc_stats

INNER_STREAM = 7


# ---------------------------------------------------------------------------
# Regression


def _exponents(n_features: int, degree: int) -> list[tuple]:
    out = [()]
    for d in range(1, degree + 1):
        out.extend(combinations_with_replacement(range(n_features), d))
    return out


def poly_basis(features: np.ndarray, degree: int) -> np.ndarray:
    """Monomials of total degree <= ``degree``, constant column first."""
    F = _as_features(features)
    cols = []
    for combo in _exponents(F.shape[1], degree):
        col = np.ones(F.shape[0])
        for j in combo:
            col = col * F[:, j]
        cols.append(col)
    return np.column_stack(cols)


@dataclass(frozen=True)
class Predictor:
    """Fitted least-squares projection on a polynomial basis.

    ``coef`` is expressed on raw monomials of the kept features, constant
    first, so it is directly interpretable.
    """

    degree: int
    keep: np.ndarray
    coef: np.ndarray
    r2: np.ndarray
    residual_norm: np.ndarray
    rank_deficient: bool = False

    def predict(self, features) -> np.ndarray:
        F = _as_features(features)[:, self.keep]
        return poly_basis(F, self.degree) @ self.coef


def _as_features(features) -> np.ndarray:
    F = np.asarray(features, dtype=float)
    if F.ndim == 1:
        F = F[:, None]
    return F


def condexp_regress(features, targets, basis_degree: int = 2,
                    ridge_weight: float = 1e-10, min_ratio: int = 10) -> Predictor:
    """Least-squares projection of ``targets`` on polynomials of ``features``.

    Features with no spread are dropped (they add nothing beyond the
    constant). A singular basis falls back to a ridge solve with penalty
    ``ridge_weight * n`` on the column-equilibrated normal equations and
    emits :class:`RankDeficientBasis`.
    """
    F = _as_features(features)
    Y = np.asarray(targets, dtype=float)
    single = Y.ndim == 1
    Y2 = Y[:, None] if single else Y
    n = F.shape[0]
    spread = np.ptp(F, axis=0) if n else np.zeros(F.shape[1])
    keep = spread > 1e-12 * (1.0 + np.max(np.abs(F), axis=0))
    X = poly_basis(F[:, keep], basis_degree)
    b = X.shape[1]
    if n < min_ratio * b:
        raise ValueError(f"{n} samples are too few for a {b}-term basis "
                         f"(need at least {min_ratio * b})")
    scale = np.sqrt(np.mean(X * X, axis=0))
    scale[scale == 0] = 1.0
    Xs = X / scale
    beta, _, rank, _ = np.linalg.lstsq(Xs, Y2, rcond=None)
    deficient = rank < b
    if deficient:
        warnings.warn(f"basis rank {rank} < {b}; ridge weight {ridge_weight}",
                      RankDeficientBasis, stacklevel=2)
        G = Xs.T @ Xs + ridge_weight * n * np.eye(b)
        beta = np.linalg.solve(G, Xs.T @ Y2)
    coef = beta / scale[:, None]
    resid = Y2 - X @ coef
    ss_res = np.sum(resid**2, axis=0)
    ss_tot = np.sum((Y2 - Y2.mean(axis=0)) ** 2, axis=0)
    tiny = ss_tot <= 1e-24 * (1.0 + np.sum(Y2**2, axis=0))
    r2 = np.where(tiny, 1.0, 1.0 - ss_res / np.where(tiny, 1.0, ss_tot))
    if single:
        coef = coef[:, 0]
    return Predictor(degree=basis_degree, keep=keep, coef=coef, r2=r2,
                     residual_norm=np.sqrt(ss_res), rank_deficient=bool(deficient))


def group_mean(ids: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Average rows of Y within each id group, broadcast back to the rows."""
    uniq, inv = np.unique(ids, return_inverse=True)
    Y2 = Y[:, None] if Y.ndim == 1 else Y
    sums = np.zeros((uniq.size, Y2.shape[1]))
    np.add.at(sums, inv, Y2)
    means = sums / np.bincount(inv)[:, None]
    out = means[inv]
    return out[:, 0] if Y.ndim == 1 else out


class Projector:
    """E[. | F_{t_i}] on a state batch: regression, or node means on a tree."""

    def __init__(self, S: StateBatch, basis_degree: int = 2,
                 lags: Optional[Sequence[int]] = None, ridge_weight: float = 1e-10):
        self.S = S
        self.degree = basis_degree
        m = S.grid.delay_steps
        self.lags = tuple(lags) if lags is not None else (0, m)
        self.ridge_weight = ridge_weight
        self.exact = bool(S.driver.exact and S.driver.node_ids is not None)

    def features(self, i: int, S: Optional[StateBatch] = None) -> np.ndarray:
        S = S or self.S
        return np.column_stack([S.at(i - lag) for lag in self.lags])

    def fit(self, i: int, targets: np.ndarray):
        """Return (fitted values, predictor or None)."""
        if self.exact:
            return group_mean(self.S.driver.node_ids[i], targets), None
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RankDeficientBasis)
            pred = condexp_regress(self.features(i), targets, self.degree,
                                   self.ridge_weight)
        return pred.predict(self.features(i)), pred


# ---------------------------------------------------------------------------
# Martingale representation


@dataclass(frozen=True)
class ReprCoeffs:
    """Integrands of the martingale representation of a target.

    ``L1[j], L2[j]`` are the dW1, dW2 integrands at ``times[j]`` (one row per
    step of the window, one column per path). ``K1[s, j], K2[s, j]`` are the
    integrands for running targets f_s, zero for times[j] >= s.
    """

    times: np.ndarray
    L1: np.ndarray
    L2: np.ndarray
    K1: Optional[np.ndarray] = None
    K2: Optional[np.ndarray] = None


def _increment_regression(features: np.ndarray, target: np.ndarray, dW1: np.ndarray,
                          dW2: np.ndarray, dt: float, degree: int, exact_ids=None):
    Y = np.column_stack([target * dW1 / dt, target * dW2 / dt])
    if exact_ids is not None:
        fitted = group_mean(exact_ids, Y)
    else:
        fitted = condexp_regress(features, Y, degree).predict(features)
    return fitted[:, 0], fitted[:, 1]


def estimate_martingale_repr(B: BrownianBatch, target: np.ndarray, window,
                             basis_degree: int = 2,
                             running: Optional[np.ndarray] = None) -> ReprCoeffs:
    """Estimate L^j(t) with E[target | F_t] = E target + sum_j int L^j dW^j.

    Uses the increment estimator L^j(t_i) = E[target dW^j_i | F_{t_i}] / dt,
    with E[. | F_{t_i}] a regression on (W1(t_i), W2(t_i)). ``running``
    (shape (k1 - k0 + 1, n)) optionally supplies targets f_s at the window
    nodes, for which K^j(s, tau) is estimated for tau < s.
    """
    grid = B.grid
    k0, k1 = grid.index_of(window[0]), grid.index_of(window[1])
    if k0 is None or k1 is None or k1 <= k0:
        raise StartOffGrid(f"window {window} is not a pair of increasing grid nodes")
    W1, W2 = B.W1(), B.W2()
    dt = grid.dt
    target = np.asarray(target, dtype=float)
    steps = range(k0, k1)
    L1 = np.empty((len(steps), B.n_paths))
    L2 = np.empty_like(L1)
    feats = {i: np.column_stack([W1[i], W2[i]]) for i in steps}
    ids = (lambda i: B.node_ids[i]) if B.exact and B.node_ids is not None else (lambda i: None)
    for j, i in enumerate(steps):
        L1[j], L2[j] = _increment_regression(feats[i], target, B.dW1[i], B.dW2[i],
                                             dt, basis_degree, ids(i))
    K1 = K2 = None
    if running is not None:
        running = np.asarray(running, dtype=float)
        ns = k1 - k0 + 1
        if running.shape != (ns, B.n_paths):
            raise ValueError(f"running targets must have shape {(ns, B.n_paths)}")
        K1 = np.zeros((ns, len(steps), B.n_paths))
        K2 = np.zeros_like(K1)
        for si in range(ns):
            for j, i in enumerate(steps):
                if k0 + si <= i:
                    break
                K1[si, j], K2[si, j] = _increment_regression(
                    feats[i], running[si], B.dW1[i], B.dW2[i], dt, basis_degree, ids(i))
    return ReprCoeffs(times=grid.times[k0:k1], L1=L1, L2=L2, K1=K1, K2=K2)


# ---------------------------------------------------------------------------
# First-order adjoint


DRIVERS = ("consistent", "printed")


@dataclass
class AdjointBatch:
    """Adjoint paths on [0, T + d].

    ``p`` has shape (N + m + 1, n) and ``q1``, ``q2`` shape (N + m, n); rows
    past the horizon are identically zero. ``predictors[i]`` keeps the
    step-i regressions so the solution can be replayed on fresh paths.
    """

    p: np.ndarray
    q1: np.ndarray
    q2: np.ndarray
    intervals: list
    diagnostics: dict
    driver: str
    predictors: list = field(default_factory=list, repr=False)

    def interval_values(self, k: int) -> np.ndarray:
        """p on the k-th delay interval counted back from T (nodes inclusive)."""
        lo, hi = self.intervals[k]
        return self.p[lo: hi + 1]


def _intervals(N: int, m: int) -> list[tuple[int, int]]:
    out = []
    k = 0
    while N - k * m > 0:
        out.append((max(N - (k + 1) * m, 0), N - k * m))
        k += 1
    return out


def solve_first_adjoint(model: ValidatedModel, S: StateBatch, basis_degree: int = 2,
                        lags: Optional[Sequence[int]] = None, driver: str = "consistent",
                        r2_floor: Optional[float] = None,
                        ridge_weight: float = 1e-10) -> AdjointBatch:
    """Backward recursion for (p, q1, q2) over the delay intervals.

    The horizon is cut into [(T-(k+1)d) v 0, T-kd], k = 0, 1, ...; on each
    interval the anticipated term E[p(t + d + dt) | F_t] reads values already
    fixed on the later interval, and p = q = 0 past T. The explicit step is

        p_i = E_i[p_{i+1}] (1 - a0 dt) + dt (l_x(x_i) - ad E_i[p_{i+m+1}] + extra_i)

    with extra_i = -sigma1 q1_i ("consistent", the driver under which the
    duality relations with the variations hold exactly in discrete time) or
    extra_i = +sigma1 E_i[q1_{i+m}] ("printed").
    """
    if driver not in DRIVERS:
        raise ValueError(f"driver must be one of {DRIVERS}")
    if S.grid != model.grid:
        raise GridMismatch("state batch grid differs from the model grid")
    par = model.params
    N, m, dt, n = model.N, model.m, model.dt, S.n_paths
    dW1, dW2 = S.driver.dW1, S.driver.dW2
    proj = Projector(S, basis_degree, lags, ridge_weight)

    p = np.zeros((N + m + 1, n))
    q1 = np.zeros((N + m, n))
    q2 = np.zeros((N + m, n))
    p[N] = model.cost.r.dx(S.terminal)
    r2 = np.ones(N)
    predictors: list = [None] * N
    intervals = _intervals(N, m)
    interval_diag = []

    for k, (lo, hi) in enumerate(intervals):
        for i in range(hi - 1, lo - 1, -1):
            cols = [p[i + 1], p[i + 1] * dW1[i] / dt, p[i + 1] * dW2[i] / dt]
            ahead = i + m + 1 <= N
            if ahead:
                cols.append(p[i + m + 1])
            printed_ahead = driver == "printed" and i + m <= N - 1 and par.sigma1
            if printed_ahead:
                cols.append(q1[i + m])
            fitted, pred = proj.fit(i, np.column_stack(cols))
            predictors[i] = pred
            if pred is not None:
                r2[i] = pred.r2[0]
            Ep = fitted[:, 0]
            q1[i] = -fitted[:, 1]
            q2[i] = -fitted[:, 2]
            drift = model.cost.l.dx(S.at(i))
            if ahead and par.ad:
                drift = drift - par.ad * fitted[:, 3]
            if driver == "consistent":
                drift = drift - par.sigma1 * q1[i]
            elif printed_ahead:
                drift = drift + par.sigma1 * fitted[:, -1]
            p[i] = Ep * (1.0 - par.a0 * dt) + dt * drift
        min_r2 = float(r2[lo:hi].min())
        flagged = r2_floor is not None and min_r2 < r2_floor
        if flagged:
            warnings.warn(
                f"interval {k} [{lo * dt:g}, {hi * dt:g}]: min R^2 {min_r2:.3g} "
                f"below floor {r2_floor}", RegressionQualityBelowFloor, stacklevel=2)
        interval_diag.append({"k": k, "t_lo": lo * dt, "t_hi": hi * dt,
                              "min_r2": min_r2, "flagged": bool(flagged)})

    diagnostics = {"r2": r2, "intervals": interval_diag, "basis_degree": basis_degree,
                   "lags": proj.lags, "exact": proj.exact}
    return AdjointBatch(p=p, q1=q1, q2=q2, intervals=intervals, diagnostics=diagnostics,
                        driver=driver, predictors=predictors)


def bsde_residuals(model: ValidatedModel, A: AdjointBatch, S: StateBatch) -> dict:
    """Replay a regression-solved adjoint on a state batch and test residuals.

    With S a fresh batch (not the one the regressions were fitted on), the
    per-step residual p_i - p_{i+1} - F_i dt - q_i . dW_i must have zero
    conditional mean. Returns per-step means, standard errors and z-scores.
    """
    if any(pr is None for pr in A.predictors):
        raise ValueError("adjoint has no stored regressions (tree-solved?)")
    par = model.params
    N, m, dt, n = model.N, model.m, model.dt, S.n_paths
    lags = A.diagnostics["lags"]
    proj = Projector(S, A.diagnostics["basis_degree"], lags)
    p = np.zeros((N + m + 1, n))
    q1 = np.zeros((N + m, n))
    p[N] = model.cost.r.dx(S.terminal)
    means = np.empty(N)
    ses = np.empty(N)
    dW1, dW2 = S.driver.dW1, S.driver.dW2
    for i in range(N - 1, -1, -1):
        fitted = A.predictors[i].predict(proj.features(i))
        Ep = fitted[:, 0]
        q1[i] = -fitted[:, 1]
        q2_i = -fitted[:, 2]
        drift = model.cost.l.dx(S.at(i))
        if i + m + 1 <= N and par.ad:
            drift = drift - par.ad * fitted[:, 3]
        if A.driver == "consistent":
            drift = drift - par.sigma1 * q1[i]
        elif i + m <= N - 1 and par.sigma1:
            drift = drift + par.sigma1 * fitted[:, -1]
        p[i] = Ep * (1.0 - par.a0 * dt) + dt * drift
        F = drift - par.a0 * Ep
        resid = p[i] - p[i + 1] - F * dt - q1[i] * dW1[i] - q2_i * dW2[i]
        means[i], ses[i] = mc_stats(resid)
    z = np.divide(np.abs(means), ses, out=np.zeros(N), where=ses > 0)
    return {"mean": means, "std_error": ses, "z": z}


# ---------------------------------------------------------------------------
# Second-order adjoint


@dataclass(frozen=True)
class PEstimate:
    s: float
    index: int
    values: np.ndarray
    mean: float
    std_error: float


def _p_target(model: ValidatedModel, x_rows: np.ndarray, ytil: np.ndarray) -> np.ndarray:
    """r_xx(x_N) y(T)^2 + dt sum_{t_j < T} l_xx(x_j) y(t_j)^2 along paths."""
    cost = model.cost
    val = cost.r.dxx(x_rows[-1]) * ytil[-1] ** 2
    if ytil.shape[0] > 1 and not cost.l.curvature_free:
        val = val + model.dt * np.sum(cost.l.dxx(x_rows[:-1]) * ytil[:-1] ** 2, axis=0)
    return val


def second_adjoint_targets(model: ValidatedModel, S: StateBatch, k: int,
                           scheme: str = "euler") -> np.ndarray:
    """Per-path integrand for P(t_k), with the auxiliary process driven by the
    path's own W1 after t_k. Its conditional mean given F_{t_k} is P(t_k)."""
    n = S.n_paths
    if model.cost.second_order_free:
        return np.zeros(n)
    ytil = aux_recursion(model, S.driver.dW1[k:], scheme)
    return _p_target(model, S.x[model.m + k:], ytil)


def second_adjoint_sweep(model: ValidatedModel, S: StateBatch,
                         indices: Optional[Sequence[int]] = None,
                         scheme: str = "euler") -> dict:
    """P integrands at several grid indices (default: every index m+1..N)."""
    if indices is None:
        indices = range(model.m + 1, model.N + 1)
    return {int(k): second_adjoint_targets(model, S, int(k), scheme) for k in indices}


def estimate_second_adjoint(model: ValidatedModel, S: StateBatch, s: float,
                            n_inner: int = 100, method: str = "nested",
                            scheme: str = "exponential", seed: Optional[int] = None,
                            max_paths: int = 5_000_000, workers: int = 1,
                            basis_degree: int = 2) -> PEstimate:
    """Estimate P(s) for every outer path of ``S``.

    ``method="nested"`` restarts ``n_inner`` fresh continuations from each
    outer path's history at time s, simulating the state and the auxiliary
    process jointly, and averages the integrand. ``method="regression"``
    uses each path's own future once and projects on time-s features.
    """
    if S.grid != model.grid:
        raise GridMismatch("state batch grid differs from the model grid")
    k = model.grid.index_of(s)
    if k is None:
        raise StartOffGrid(f"time {s} is not a grid node")
    n = S.n_paths
    exact = S.driver.exact
    if model.cost.second_order_free:
        zeros = np.zeros(n)
        return PEstimate(s=k * model.dt, index=k, values=zeros, mean=0.0, std_error=0.0)

    if method == "regression":
        target = second_adjoint_targets(model, S, k, scheme)
        fitted, _ = Projector(S, basis_degree).fit(k, target)
        mean, se = mc_stats(target, exact)
        return PEstimate(s=k * model.dt, index=k, values=fitted, mean=mean, std_error=se)
    if method != "nested":
        raise ValueError(f"unknown method {method!r}")
    if n_inner < 1:
        raise ValueError("n_inner must be >= 1")
    if n * n_inner > max_paths:
        raise BudgetExceeded(f"{n} x {n_inner} inner paths exceed the cap {max_paths}")

    seed = S.driver.seed if seed is None else seed
    values = np.empty(n)
    chunk = max(1, (1 << 17) // n_inner)
    starts = list(range(0, n, chunk))
    par = model.params
    m, N, dt = model.m, model.N, model.dt
    L = N - k
    u = S.control.values
    ud = S.control.delayed()

    def run(c):
        lo = starts[c]
        hi = min(lo + chunk, n)
        rows = (hi - lo) * n_inner
        if L == 0:
            xT = np.repeat(S.terminal[lo:hi], n_inner)
            vals = model.cost.r.dxx(xT)
            values[lo:hi] = vals.reshape(hi - lo, n_inner).mean(axis=1)
            return
        ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(INNER_STREAM, k, c))
        z = np.random.Generator(np.random.Philox(ss)).standard_normal((L, 2, rows))
        dW1 = math.sqrt(dt) * z[:, 0]
        dW2 = math.sqrt(dt) * z[:, 1]
        x = np.empty((m + L + 1, rows))
        x[: m + 1] = np.repeat(S.x[k: k + m + 1, lo:hi], n_inner, axis=1)
        for j in range(L):
            i = k + j
            cur = x[m + j]
            x[m + j + 1] = (cur + (par.b0 * u[i] - par.a0 * cur - par.ad * x[j]) * dt
                            + par.sigma1 * cur * dW1[j] + par.sigma2 * ud[i] * dW2[j])
        ytil = aux_recursion(model, dW1, scheme)
        vals = _p_target(model, x[m:], ytil)
        values[lo:hi] = vals.reshape(hi - lo, n_inner).mean(axis=1)

    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, range(len(starts))))
    else:
        for c in range(len(starts)):
            run(c)
    # inner noise is Gaussian even when the outer batch is a tree
    mean, se = mc_stats(values)
    return PEstimate(s=k * model.dt, index=k, values=values, mean=mean, std_error=se)
