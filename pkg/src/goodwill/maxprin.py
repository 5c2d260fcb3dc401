"""Duality relations, cost expansion and the maximum-principle check.

With du = (u - v) on the spike window and the adjoint convention of
:mod:`goodwill.adjoint`, the expansion of the cost reads

    J(u) - J(u^eps) = E int [dc - b0 p du + sigma2 q2 du(. - d)] ds
                      + 1/2 E int sigma2^2 du(. - d)^2 P ds + o(eps),

where dc = c(u) - c(v) on the window. Optimality of u forces the bracket to
be non-positive for a spike at t, which gives the pointwise gap

    gap(t, v) = (c(u_t) - c(v)) - b0 (u_t - v) p(t)
                + sigma2 (u_t - v) E_t q2(t + d) + 1/2 sigma2^2 (u_t - v)^2 E_t P(t + d)

and the necessary condition gap <= 0 for every v in U.

On the Euler grid the pairings that make these identities exact are
p(t_{i+1}) against du at step i, q2(t_i) against du(t_i - d), and
P(t_{i+1}) against du(t_i - d).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .adjoint import AdjointBatch, Projector, second_adjoint_sweep
from .errors import GridMismatch
from .model import (
    ControlSignal,
    SpikeSpec,
    ValidatedModel,
    apply_spike,
    delayed_delta,
    spike_delta,
)
from .paths import (
    BrownianBatch,
    CostEstimate,
    StateBatch,
    VariationBatch,
    mc_stats,
    pathwise_cost,
    simulate_state,
)


@dataclass(frozen=True)
class DualityReport:
    relation: str
    lhs_mean: float
    lhs_stderr: float
    rhs_mean: float
    rhs_stderr: float
    z_score: float
    diff_mean: float = 0.0
    diff_stderr: float = 0.0


@dataclass(frozen=True)
class ExpansionReport:
    epsilon: float
    cost_diff: CostEstimate
    first_order_term: CostEstimate
    second_order_term: CostEstimate
    residual: CostEstimate


@dataclass(frozen=True)
class MPReport:
    """Gap table for every (t, v) and the statistically positive ones.

    ``rows`` and ``violations`` hold (t, v, gap_mean, gap_stderr) tuples
    sorted by t then v.
    """

    rows: list
    violations: list
    max_gap: float
    checked_points: int
    threshold: float
    flags: dict = field(default_factory=dict)


def _z(a: float, sa: float, b: float, sb: float) -> float:
    pooled = math.hypot(sa, sb)
    if pooled == 0:
        return 0.0 if a == b else math.inf
    return abs(a - b) / pooled


def _stats(values, exact: bool, n: int) -> CostEstimate:
    mean, se = mc_stats(values, exact)
    return CostEstimate(mean=mean, std_error=se, n_paths=n)


def _check(model: ValidatedModel, *objs) -> None:
    for g in objs:
        if g != model.grid:
            raise GridMismatch(f"grid {g} does not match model grid {model.grid}")


def check_duality_first(model: ValidatedModel, S: StateBatch, V: VariationBatch,
                        A: AdjointBatch, which: str) -> DualityReport:
    """Compare both sides of the first duality relation for y or z.

    y: E[r_x(x_T) y_T]  vs  -E int [l_x(x) y + sigma2 q2 du(. - d)] ds
    z: E[r_x(x_T) z_T]  vs  -E int l_x(x) z ds + E int b0 p du ds
    """
    _check(model, S.grid)
    par = model.params
    m, N, dt = model.m, model.N, model.dt
    rx = model.cost.r.dx(S.terminal)
    lx = model.cost.l.dx(S.x[m:-1])
    if which == "y":
        lhs = rx * V.y[-1]
        dud = delayed_delta(V.delta_u, model.grid)
        rhs = -dt * np.sum(lx * V.y[m:-1], axis=0)
        if par.sigma2:
            rhs = rhs - dt * par.sigma2 * np.sum(A.q2[:N] * dud[:, None], axis=0)
    elif which == "z":
        lhs = rx * V.z[-1]
        rhs = (-dt * np.sum(lx * V.z[m:-1], axis=0)
               + dt * par.b0 * np.sum(A.p[1: N + 1] * V.delta_u[:, None], axis=0))
    else:
        raise ValueError("which must be 'y' or 'z'")
    exact = S.driver.exact
    lm, ls = mc_stats(lhs, exact)
    rm, rs = mc_stats(rhs, exact)
    dm, ds = mc_stats(lhs - rhs, exact)
    return DualityReport(relation=f"first_{which}", lhs_mean=lm, lhs_stderr=ls,
                         rhs_mean=rm, rhs_stderr=rs, z_score=_z(lm, ls, rm, rs),
                         diff_mean=dm, diff_stderr=ds)


def hamiltonian_gap(v, u_t, p_t, q2_ahead, P_ahead, cost, model: ValidatedModel):
    """Pointwise maximum-principle gap; the principle asserts it is <= 0.

    ``p_t`` is the adjoint at the right end of the step, ``q2_ahead`` and
    ``P_ahead`` the conditional expectations of q2(t + d) and P(t + d) (zero
    once t + d passes the horizon). Works elementwise on arrays.
    """
    par = model.params
    du = np.asarray(u_t, dtype=float) - v
    gap = (cost.c(u_t) - cost.c(v)) - par.b0 * du * p_t
    if par.sigma2:
        gap = gap + par.sigma2 * du * q2_ahead + 0.5 * par.sigma2**2 * du**2 * P_ahead
    return gap


def _needed_P(model: ValidatedModel) -> list[int]:
    return list(range(model.m + 1, model.N + 1))


def verify_max_principle(model: ValidatedModel, u: ControlSignal, S: StateBatch,
                         A: AdjointBatch, P_sweep: Optional[dict] = None,
                         threshold: float = 3.0, tol: float = 1e-12) -> MPReport:
    """Average the gap over paths for every grid step and every v in U.

    A point is a violation when its mean gap exceeds ``threshold`` standard
    errors (and ``tol``, which matters for exact tree averages).
    """
    _check(model, u.grid, S.grid)
    par = model.params
    m, N, dt = model.m, model.N, model.dt
    exact = S.driver.exact
    need_second = bool(par.sigma2) and not model.cost.second_order_free
    if need_second and P_sweep is None:
        P_sweep = second_adjoint_sweep(model, S, _needed_P(model))
    proj = Projector(S, A.diagnostics["basis_degree"], A.diagnostics["lags"])
    levels = model.U.sorted_values
    rows = []
    for i in range(N):
        cols = [A.p[i + 1]]
        ahead = i + m <= N - 1 and bool(par.sigma2)
        if ahead:
            cols.append(A.q2[i + m])
            if need_second:
                cols.append(P_sweep[i + m + 1])
        fitted, _ = proj.fit(i, np.column_stack(cols))
        p_t = fitted[:, 0]
        q2_t = fitted[:, 1] if ahead else 0.0
        P_t = fitted[:, 2] if ahead and need_second else 0.0
        u_i = u.values[i]
        for v in levels:
            if v == u_i:
                rows.append((i * dt, v, 0.0, 0.0))
                continue
            gap = hamiltonian_gap(v, u_i, p_t, q2_t, P_t, model.cost, model)
            gm, gs = mc_stats(np.broadcast_to(gap, (S.n_paths,)), exact)
            rows.append((i * dt, v, gm, gs))
    violations = [r for r in rows if r[2] > max(threshold * r[3], tol)]
    max_gap = max(r[2] for r in rows)
    return MPReport(rows=rows, violations=violations, max_gap=max_gap,
                    checked_points=len(rows), threshold=threshold,
                    flags={"min_r2": float(np.min(A.diagnostics["r2"]))})


def check_cost_expansion(model: ValidatedModel, u: ControlSignal, spike: SpikeSpec,
                         S: StateBatch, A: AdjointBatch, P_sweep: Optional[dict] = None,
                         B: Optional[BrownianBatch] = None) -> ExpansionReport:
    """Compare J(u) - J(u^eps) (common noise) with its first+second order terms."""
    B = B or S.driver
    _check(model, u.grid, S.grid, B.grid)
    par = model.params
    N, dt = model.N, model.dt
    u_eps = apply_spike(u, spike)
    S_eps = simulate_state(model, u_eps, B)
    diff = pathwise_cost(model, u, S.x) - pathwise_cost(model, u_eps, S_eps.x)

    du = spike_delta(u, spike)
    dud = delayed_delta(du, model.grid)
    on = du != 0
    dc = np.zeros(N)
    dc[on] = model.cost.c(u.values[on]) - model.cost.c(spike.v)
    first = dt * (np.sum(dc) - par.b0 * np.sum(A.p[1: N + 1] * du[:, None], axis=0))
    second = np.zeros(S.n_paths)
    if par.sigma2:
        first = first + dt * par.sigma2 * np.sum(A.q2[:N] * dud[:, None], axis=0)
        if not model.cost.second_order_free:
            idx = [i + 1 for i in range(N) if dud[i]]
            missing = [k for k in idx if P_sweep is None or k not in P_sweep]
            if missing:
                P_sweep = {**(P_sweep or {}), **second_adjoint_sweep(model, S, missing)}
            for k in idx:
                second = second + 0.5 * dt * par.sigma2**2 * dud[k - 1] ** 2 * P_sweep[k]
    first = np.broadcast_to(first, (S.n_paths,))
    exact, n = S.driver.exact, S.n_paths
    return ExpansionReport(
        epsilon=spike.epsilon,
        cost_diff=_stats(diff, exact, n),
        first_order_term=_stats(first, exact, n),
        second_order_term=_stats(second, exact, n),
        residual=_stats(diff - first - second, exact, n),
    )
