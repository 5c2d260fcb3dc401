"""Spike-variation descent, exhaustive tree oracle and epsilon-order studies."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .adjoint import second_adjoint_sweep, solve_first_adjoint
from .errors import EnumerationCapExceeded, EpsilonNotAligned
from .maxprin import verify_max_principle
from .model import (
    ControlSignal,
    SpikeSpec,
    TimeGrid,
    ValidatedModel,
    apply_spike,
    spike_window,
)
from .paths import (
    BrownianBatch,
    CostEstimate,
    estimate_cost,
    sample_brownian,
    simulate_state,
    simulate_variations,
    tree_brownian,
)

# ---------------------------------------------------------------------------
# Scenario-tree oracle


@dataclass
class OracleResult:
    best_control: tuple
    best_cost: float
    enumerated: int
    tree_spec: dict
    costs: dict = field(repr=False, default_factory=dict)
    model: Optional[ValidatedModel] = field(repr=False, default=None)

    def strict_improvements(self) -> list:
        """Single-step flips of the optimum that the optimum strictly beats.

        Returns (step, level, cost increase) sorted by decreasing increase.
        """
        out = []
        best = self.best_control
        for k, level in itertools.product(range(len(best)), sorted({v for s in self.costs for v in s})):
            if level == best[k]:
                continue
            seq = best[:k] + (level,) + best[k + 1:]
            inc = self.costs[seq] - self.best_cost
            if inc > 0:
                out.append((k, level, inc))
        return sorted(out, key=lambda r: (-r[2], r[0], r[1]))


def coarse_model(model: ValidatedModel, n_coarse_steps: int) -> ValidatedModel:
    """Same model on a grid with ``n_coarse_steps`` steps over [0, T]."""
    par = model.params
    grid = TimeGrid.build(par.horizon_T / n_coarse_steps, par.horizon_T, par.delay_d)
    return model.with_grid(grid)


def tree_oracle(model: ValidatedModel, n_coarse_steps: int,
                enumeration_cap: int = 2_000_000) -> OracleResult:
    """Exhaustive minimum of J over open-loop controls on the 2-point tree.

    Each Brownian increment takes +/- sqrt(dt) with probability 1/2 per
    component, so expectations are exact finite averages. Controls are
    enumerated over sorted U in lexicographic order; the first minimiser
    wins ties, which makes the result independent of the order U was given.
    """
    if not 1 <= n_coarse_steps <= 6:
        raise ValueError("n_coarse_steps must be between 1 and 6")
    levels = model.U.sorted_values
    size = len(levels) ** n_coarse_steps * 4**n_coarse_steps
    if size > enumeration_cap:
        raise EnumerationCapExceeded(
            f"{len(levels)}^{n_coarse_steps} controls x 4^{n_coarse_steps} paths = "
            f"{size} > cap {enumeration_cap}")
    cm = coarse_model(model, n_coarse_steps)
    B = tree_brownian(cm.grid)
    costs = {}
    best_seq, best_cost = None, math.inf
    for seq in itertools.product(levels, repeat=n_coarse_steps):
        u = ControlSignal(cm.grid, np.array(seq))
        J = estimate_cost(cm, u, simulate_state(cm, u, B)).mean
        costs[seq] = J
        if J < best_cost:
            best_seq, best_cost = seq, J
    spec = {"n_coarse_steps": n_coarse_steps, "dt": cm.dt, "branching": "2-point per component",
            "paths": B.n_paths}
    return OracleResult(best_control=best_seq, best_cost=best_cost, enumerated=len(costs),
                        tree_spec=spec, costs=costs, model=cm)


# ---------------------------------------------------------------------------
# Spike descent


@dataclass
class OptimizeResult:
    control: ControlSignal
    cost_trace: list
    accepted_spikes: list
    stop_reason: str
    trace_rows: list = field(default_factory=list)


def worst_constant_control(model: ValidatedModel, B: BrownianBatch) -> ControlSignal:
    """Constant control in U with the highest estimated cost."""
    best = None
    for level in model.U.sorted_values:
        u = ControlSignal.constant(model.grid, level)
        J = estimate_cost(model, u, simulate_state(model, u, B)).mean
        if best is None or J > best[0]:
            best = (J, u)
    return best[1]


def spike_descent(model: ValidatedModel, u0: ControlSignal, budget: int = 20,
                  seed: int = 0, n_paths: int = 20_000, B: Optional[BrownianBatch] = None,
                  threshold: float = 3.0, eps_init: Optional[float] = None,
                  basis_degree: int = 2, tol: float = 1e-12) -> OptimizeResult:
    """Greedy control improvement driven by maximum-principle violations.

    Each iteration takes the largest statistically positive gap (t, v) and
    tries a spike of the current width there; the spike is kept only if the
    common-noise cost drops by more than one pooled standard error. Rejected
    spikes halve the width down to one step, then the next violation is
    tried. Stops on an empty violation list, exhausted budget, or when no
    violation yields an accepted spike.
    """
    grid = model.grid
    if B is None:
        B = sample_brownian(grid, n_paths, seed)
    width = max(1, round((eps_init if eps_init is not None else 4 * grid.dt) / grid.dt))
    u = u0
    J = estimate_cost(model, u, simulate_state(model, u, B))
    trace = [J]
    rows = [(0, J.mean, J.std_error, None, None, None)]
    accepted: list = []

    def evaluate(spike):
        u_new = apply_spike(u, spike)
        return u_new, estimate_cost(model, u_new, simulate_state(model, u_new, B))

    stop = "budget"
    for it in range(1, budget + 1):
        S = simulate_state(model, u, B)
        A = solve_first_adjoint(model, S, basis_degree)
        P = None
        if model.params.sigma2 and not model.cost.second_order_free:
            P = second_adjoint_sweep(model, S, range(model.m + 1, model.N + 1))
        report = verify_max_principle(model, u, S, A, P, threshold)
        if not report.violations:
            stop = "no_violation"
            break
        candidates = sorted(report.violations, key=lambda r: (-r[2], r[0], r[1]))
        step = None
        for t, v, _, _ in candidates:
            k0 = grid.index_of(t)
            w = width
            while True:
                w_eff = min(w, grid.n_steps - k0)
                spike = SpikeSpec(t_start=t, epsilon=w_eff * grid.dt, v=v)
                u_new, J_new = evaluate(spike)
                pooled = math.hypot(J.std_error, J_new.std_error)
                if J.mean - J_new.mean > max(pooled, tol):
                    step = (spike, u_new, J_new)
                    width = w
                    break
                if w == 1:
                    break
                w = max(1, w // 2)
            if step:
                break
        if step is None:
            stop = "stagnation"
            break
        spike, u, J = step
        accepted.append(spike)
        trace.append(J)
        rows.append((it, J.mean, J.std_error, spike.t_start, spike.v, spike.epsilon))
    return OptimizeResult(control=u, cost_trace=trace, accepted_spikes=accepted,
                          stop_reason=stop, trace_rows=rows)


# ---------------------------------------------------------------------------
# Epsilon-order study


QUANTITIES = ("sup_y2", "sup_z2", "sup_rem1", "sup_rem2")
QUANTITY_LABELS = {
    "sup_y2": "E sup|y|^2",
    "sup_z2": "E sup|z|^2",
    "sup_rem1": "E sup|dx - y|^2",
    "sup_rem2": "E sup|dx - y - z|^2",
}


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    intercept: float
    slope_stderr: float
    lower: float
    upper: float
    epsilons: tuple
    values: tuple
    stderrs: tuple
    identically_zero: bool = False


@dataclass(frozen=True)
class SlopeReport:
    quantities: dict
    t_start: float
    v: float
    n_paths: int


def fit_loglog(eps: Sequence[float], values: Sequence[float], stderrs: Sequence[float],
               zero_floor: float = 0.0, band: float = 2.0) -> SlopeFit:
    """Weighted least-squares slope of log(value) against log(eps).

    Weights come from the delta-method variance (se/value)^2; the slope
    standard error is inflated by the reduced chi-square when the points
    scatter more than their error bars. Values all at or below
    ``zero_floor`` are reported as identically zero with an infinite slope.
    """
    eps = np.asarray(eps, dtype=float)
    q = np.asarray(values, dtype=float)
    se = np.asarray(stderrs, dtype=float)
    packed = dict(epsilons=tuple(eps), values=tuple(q), stderrs=tuple(se))
    if np.all(q <= zero_floor):
        return SlopeFit(math.inf, -math.inf, 0.0, math.inf, math.inf,
                        identically_zero=True, **packed)
    if np.any(q <= 0):
        raise ValueError("cannot fit a log-log slope through non-positive values")
    X = np.column_stack([np.ones_like(eps), np.log(eps)])
    y = np.log(q)
    rel = se / q
    floor = 1e-12
    w = 1.0 / np.maximum(rel, floor) ** 2
    XtW = X.T * w
    cov = np.linalg.inv(XtW @ X)
    beta = cov @ (XtW @ y)
    resid = y - X @ beta
    dof = max(len(eps) - 2, 1)
    chi2 = float(np.sum(w * resid**2)) / dof
    slope_se = math.sqrt(cov[1, 1] * max(1.0, chi2))
    slope = float(beta[1])
    return SlopeFit(slope, float(beta[0]), slope_se, slope - band * slope_se,
                    slope + band * slope_se, **packed)


def convergence_study(model: ValidatedModel, u: ControlSignal, t_start: float, v: float,
                      epsilons: Sequence[float], n_paths: int, seed: int,
                      workers: int = 1) -> SlopeReport:
    """Moments of the variations and of the expansion remainders versus eps.

    With du = u - v the variations approximate dx = x - x^eps, so the
    remainders are dx - y and dx - y - z. All eps share one noise batch.
    """
    grid = model.grid
    eps = sorted(float(e) for e in epsilons)
    if len(eps) < 4:
        raise EpsilonNotAligned("need at least 4 epsilon values")
    if eps[-1] / eps[0] < 8 - 1e-9:
        raise EpsilonNotAligned("epsilon values must span at least a factor 8")
    for e in eps:
        try:
            spike_window(SpikeSpec(t_start, e, v), grid)
        except Exception as exc:
            raise EpsilonNotAligned(f"epsilon {e}: {exc}") from exc

    B = sample_brownian(grid, n_paths, seed, workers=workers)
    S = simulate_state(model, u, B)
    m = model.m
    scale = float(np.max(np.abs(S.x)))
    floor = (1e-10 * (1.0 + scale)) ** 2
    per_q = {name: ([], []) for name in QUANTITIES}
    for e in eps:
        spike = SpikeSpec(t_start, e, v)
        S_eps = simulate_state(model, apply_spike(u, spike), B)
        V = simulate_variations(model, u, spike, B)
        dx = (S.x - S_eps.x)[m:]
        y, z = V.y[m:], V.z[m:]
        sups = {
            "sup_y2": np.max(y * y, axis=0),
            "sup_z2": np.max(z * z, axis=0),
            "sup_rem1": np.max((dx - y) ** 2, axis=0),
            "sup_rem2": np.max((dx - y - z) ** 2, axis=0),
        }
        for name, s in sups.items():
            per_q[name][0].append(float(np.mean(s)))
            per_q[name][1].append(float(np.std(s, ddof=1) / math.sqrt(n_paths)))
    fits = {name: fit_loglog(eps, vals, ses, zero_floor=floor)
            for name, (vals, ses) in per_q.items()}
    return SlopeReport(quantities=fits, t_start=t_start, v=v, n_paths=n_paths)


def cost_of(model: ValidatedModel, u: ControlSignal, B: BrownianBatch) -> CostEstimate:
    return estimate_cost(model, u, simulate_state(model, u, B))
