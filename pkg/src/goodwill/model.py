"""Model constants, control set, cost families, control signals and spikes.

The controlled goodwill dynamics are

    dx = [b0 u(t) - a0 x(t) - ad x(t-d)] dt + sigma1 x(t) dW1 + sigma2 u(t-d) dW2,

with history x0 on [-d, 0], and the cost to minimise is

    J(u) = E int_0^T (c(u) - l(x)) ds - E r(x(T)).

Everything here is immutable once built; ``validate_model`` is the single
entry point that checks the standing assumptions and seals a model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence, Union

import numpy as np

from .errors import (
    DelayExceedsHorizon,
    DelayNotGridAligned,
    EmptyControlSet,
    ExcessiveRewardGrowth,
    ModelError,
    NonConvexCost,
    NonIncreasingTerminalReward,
    NonPositiveDelay,
    TabulatedCostOffGrid,
    WindowNotAligned,
    WindowOutOfRange,
)

_ALIGN_RTOL = 1e-9


def _as_int_steps(value: float, dt: float) -> int | None:
    """Return value/dt if it is an integer up to round-off, else None."""
    ratio = value / dt
    k = round(ratio)
    if math.isclose(ratio, k, rel_tol=_ALIGN_RTOL, abs_tol=_ALIGN_RTOL):
        return int(k)
    return None


# ---------------------------------------------------------------------------
# Time grid


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_i = i*dt, i = 0..n_steps, extended back by the delay.

    ``delay_steps`` history nodes sit before t = 0; arrays indexed in
    "extended" coordinates put time t_i at position ``i + delay_steps``.
    """

    dt: float
    n_steps: int
    delay_steps: int

    @classmethod
    def build(cls, dt: float, horizon_T: float, delay_d: float) -> "TimeGrid":
        if dt <= 0:
            raise ModelError(f"dt must be positive, got {dt}", "positive time step")
        if delay_d <= 0:
            raise NonPositiveDelay(f"delay must be positive, got {delay_d}")
        n = _as_int_steps(horizon_T, dt)
        if n is None or n < 1:
            raise ModelError(
                f"horizon {horizon_T} is not a whole number of steps of {dt}",
                "grid-aligned horizon",
            )
        m = _as_int_steps(delay_d, dt)
        if m is None:
            raise DelayNotGridAligned(
                f"delay/dt = {delay_d / dt:g} is not an integer (d={delay_d}, dt={dt})"
            )
        return cls(dt=float(dt), n_steps=n, delay_steps=m)

    @property
    def horizon(self) -> float:
        return self.n_steps * self.dt

    @property
    def delay(self) -> float:
        return self.delay_steps * self.dt

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    @property
    def extended_times(self) -> np.ndarray:
        return np.arange(-self.delay_steps, self.n_steps + 1) * self.dt

    def index_of(self, t: float) -> int | None:
        """Grid index of time t, or None if t is not a node of [0, T]."""
        k = _as_int_steps(t, self.dt) if t != 0 else 0
        if k is None or k < 0 or k > self.n_steps:
            return None
        return k


# ---------------------------------------------------------------------------
# Model constants


@dataclass(frozen=True)
class ModelParams:
    a0: float
    ad: float
    b0: float
    sigma1: float
    sigma2: float
    delay_d: float
    horizon_T: float
    history: Union[float, tuple] = 0.0

    def history_on(self, grid: TimeGrid) -> np.ndarray:
        """History samples at the grid's delay_steps+1 nodes of [-d, 0].

        A scalar history is constant. A sample sequence is read as uniformly
        spaced on [-d, 0] and mapped to the grid by left-constant lookup.
        """
        m = grid.delay_steps
        if np.isscalar(self.history):
            return np.full(m + 1, float(self.history))
        h = np.asarray(self.history, dtype=float)
        if h.ndim != 1 or h.size == 0:
            raise ModelError("history must be a scalar or a 1-d sample list",
                             "history defined on [-d, 0]")
        if h.size == m + 1:
            return h.copy()
        if h.size == 1:
            return np.full(m + 1, h[0])
        src = np.linspace(-self.delay_d, 0.0, h.size)
        dst = grid.extended_times[: m + 1]
        idx = np.searchsorted(src, dst + 1e-12 * grid.dt, side="right") - 1
        return h[np.clip(idx, 0, h.size - 1)]


# ---------------------------------------------------------------------------
# Control set


@dataclass(frozen=True)
class ControlSet:
    """Finite set of admissible advertising levels (no convexity assumed)."""

    values: tuple

    def __init__(self, values: Sequence[float]):
        vals = tuple(float(v) for v in values)
        if not vals:
            raise EmptyControlSet("control set is empty")
        if len(set(vals)) != len(vals):
            raise ModelError("control set has duplicate values", "distinct control levels")
        if not all(math.isfinite(v) for v in vals):
            raise EmptyControlSet("control set must be bounded (finite values)")
        object.__setattr__(self, "values", vals)

    @property
    def sorted_values(self) -> tuple:
        return tuple(sorted(self.values))

    def __contains__(self, v) -> bool:
        return float(v) in self.values

    def __len__(self) -> int:
        return len(self.values)


# ---------------------------------------------------------------------------
# Cost families


@dataclass(frozen=True)
class QuadraticControlCost:
    """c(u) = alpha u^2 + beta u."""

    alpha: float = 1.0
    beta: float = 0.0

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        return self.alpha * u * u + self.beta * u


@dataclass(frozen=True)
class TabulatedControlCost:
    """c given by a table on U; off-table queries are rejected."""

    table: tuple  # ((u, c(u)), ...) sorted by u

    def __init__(self, table: Mapping[float, float] | Sequence):
        items = table.items() if isinstance(table, Mapping) else table
        pairs = tuple(sorted((float(k), float(v)) for k, v in items))
        object.__setattr__(self, "table", pairs)

    def __call__(self, u):
        lookup = dict(self.table)
        arr = np.asarray(u, dtype=float)
        flat = arr.ravel()
        out = np.empty_like(flat)
        for j, val in enumerate(flat):
            if val not in lookup:
                raise TabulatedCostOffGrid(f"tabulated cost has no entry for u={val}")
            out[j] = lookup[val]
        return out.reshape(arr.shape) if arr.ndim else float(out[0])

    def interpolate(self, u: float) -> float:
        """Piecewise-linear extension, used only for convexity checks."""
        xs, ys = zip(*self.table)
        return float(np.interp(u, xs, ys))


@dataclass(frozen=True)
class LinearReward:
    """f(x) = slope x + intercept."""

    slope: float = 1.0
    intercept: float = 0.0
    curvature_free = True

    def value(self, x):
        return self.slope * np.asarray(x, dtype=float) + self.intercept

    def dx(self, x):
        return np.full_like(np.asarray(x, dtype=float), self.slope)

    def dxx(self, x):
        return np.zeros_like(np.asarray(x, dtype=float))


@dataclass(frozen=True)
class QuadraticReward:
    """f(x) = slope x + curvature x^2 / 2."""

    slope: float = 0.0
    curvature: float = 1.0
    curvature_free = False

    def value(self, x):
        x = np.asarray(x, dtype=float)
        return self.slope * x + 0.5 * self.curvature * x * x

    def dx(self, x):
        return self.slope + self.curvature * np.asarray(x, dtype=float)

    def dxx(self, x):
        return np.full_like(np.asarray(x, dtype=float), self.curvature)


@dataclass(frozen=True)
class ExpCappedReward:
    """f(x) = scale (1 - exp(-rate x)); bounded above by ``scale``."""

    scale: float = 1.0
    rate: float = 1.0
    curvature_free = False

    def value(self, x):
        return self.scale * (1.0 - np.exp(-self.rate * np.asarray(x, dtype=float)))

    def dx(self, x):
        return self.scale * self.rate * np.exp(-self.rate * np.asarray(x, dtype=float))

    def dxx(self, x):
        return -self.scale * self.rate**2 * np.exp(-self.rate * np.asarray(x, dtype=float))


@dataclass(frozen=True)
class SaturatingReward:
    """f(x) = scale tanh(rate x); increasing everywhere, bounded f''."""

    scale: float = 1.0
    rate: float = 1.0
    curvature_free = False

    def value(self, x):
        return self.scale * np.tanh(self.rate * np.asarray(x, dtype=float))

    def dx(self, x):
        th = np.tanh(self.rate * np.asarray(x, dtype=float))
        return self.scale * self.rate * (1.0 - th * th)

    def dxx(self, x):
        th = np.tanh(self.rate * np.asarray(x, dtype=float))
        return -2.0 * self.scale * self.rate**2 * th * (1.0 - th * th)


CONTROL_COSTS = {"quadratic": QuadraticControlCost, "tabulated": TabulatedControlCost}
RUNNING_REWARDS = {
    "linear": LinearReward,
    "quadratic": QuadraticReward,
    "exponential_capped": ExpCappedReward,
}
TERMINAL_REWARDS = {
    "linear": LinearReward,
    "quadratic": QuadraticReward,
    "saturating": SaturatingReward,
}


@dataclass(frozen=True)
class CostSpec:
    """Advertising cost c, running reward l and terminal reward r.

    ``operating_interval`` is where r must be strictly increasing and where
    the growth of l is checked against ``growth_bound``.
    """

    c: object = field(default_factory=QuadraticControlCost)
    l: object = field(default_factory=lambda: LinearReward(0.0))
    r: object = field(default_factory=LinearReward)
    operating_interval: tuple = (0.0, 10.0)
    growth_bound: float = 100.0

    @property
    def second_order_free(self) -> bool:
        """True when l_xx and r_xx vanish identically."""
        return bool(self.l.curvature_free and self.r.curvature_free)


_COST_FUNCS = ("c", "l", "l_x", "l_xx", "r", "r_x", "r_xx")


def eval_cost(cost: CostSpec, which: str, point):
    """Evaluate c, l, r or one of their first/second derivatives."""
    if which == "c":
        return cost.c(point)
    if which not in _COST_FUNCS:
        raise ValueError(f"unknown cost function {which!r}; expected one of {_COST_FUNCS}")
    fam = cost.l if which.startswith("l") else cost.r
    method = {"": fam.value, "_x": fam.dx, "_xx": fam.dxx}[which[1:]]
    out = method(point)
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# Controls and spikes


@dataclass(frozen=True)
class ControlSignal:
    """Piecewise-constant control: ``values[i]`` holds on [t_i, t_{i+1})."""

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        if vals.shape != (self.grid.n_steps,):
            raise ModelError(
                f"control has {vals.shape} values, grid has {self.grid.n_steps} steps",
                "control on the time grid",
            )
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @classmethod
    def constant(cls, grid: TimeGrid, level: float) -> "ControlSignal":
        return cls(grid, np.full(grid.n_steps, float(level)))

    @classmethod
    def from_coarse(cls, grid: TimeGrid, levels: Sequence[float]) -> "ControlSignal":
        """Repeat each coarse level over an equal block of fine steps."""
        levels = np.asarray(levels, dtype=float)
        if grid.n_steps % levels.size:
            raise ModelError(
                f"{levels.size} coarse levels do not tile {grid.n_steps} steps",
                "control on the time grid",
            )
        return cls(grid, np.repeat(levels, grid.n_steps // levels.size))

    def delayed(self) -> np.ndarray:
        """u(t_i - d) for each step; zero before the campaign starts."""
        m = self.grid.delay_steps
        out = np.zeros(self.grid.n_steps)
        if m < self.grid.n_steps:
            out[m:] = self.values[: self.grid.n_steps - m]
        return out

    def check_in(self, U: ControlSet) -> None:
        allowed = np.array(U.values)
        bad = ~np.isin(self.values, allowed)
        if bad.any():
            i = int(np.argmax(bad))
            raise ModelError(
                f"control value {self.values[i]} at step {i} is not in U={U.values}",
                "admissible control",
            )


@dataclass(frozen=True)
class SpikeSpec:
    """Replace the control by ``v`` on [t_start, t_start + epsilon]."""

    t_start: float
    epsilon: float
    v: float


def spike_window(spike: SpikeSpec, grid: TimeGrid) -> tuple[int, int]:
    """Step range [k0, k1) covered by the spike."""
    if spike.epsilon <= 0:
        raise WindowOutOfRange(f"spike width must be positive, got {spike.epsilon}")
    tol = _ALIGN_RTOL * max(1.0, grid.horizon)
    if spike.t_start < -tol or spike.t_start + spike.epsilon > grid.horizon + tol:
        raise WindowOutOfRange(
            f"window [{spike.t_start}, {spike.t_start + spike.epsilon}] "
            f"leaves [0, {grid.horizon}]"
        )
    k0 = _as_int_steps(spike.t_start, grid.dt) if spike.t_start else 0
    width = _as_int_steps(spike.epsilon, grid.dt)
    if k0 is None or width is None or width < 1:
        raise WindowNotAligned(
            f"window start {spike.t_start} / width {spike.epsilon} not multiples of dt={grid.dt}"
        )
    return k0, k0 + width


def apply_spike(u: ControlSignal, spike: SpikeSpec) -> ControlSignal:
    """Return u^eps: equal to ``spike.v`` on the window and to u elsewhere."""
    k0, k1 = spike_window(spike, u.grid)
    vals = np.array(u.values)
    vals[k0:k1] = spike.v
    return ControlSignal(u.grid, vals)


def spike_delta(u: ControlSignal, spike: SpikeSpec) -> np.ndarray:
    """delta_u(t_i) = (u(t_i) - v) on the window, zero elsewhere."""
    k0, k1 = spike_window(spike, u.grid)
    du = np.zeros(u.grid.n_steps)
    du[k0:k1] = u.values[k0:k1] - spike.v
    return du


def delayed_delta(delta_u: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """delta_u(t_i - d), zero for t_i < d."""
    m = grid.delay_steps
    out = np.zeros(grid.n_steps)
    if m < grid.n_steps:
        out[m:] = delta_u[: grid.n_steps - m]
    return out


# ---------------------------------------------------------------------------
# Validation


@dataclass(frozen=True)
class ValidatedModel:
    """Sealed bundle of parameters, control set, costs and grid."""

    params: ModelParams
    U: ControlSet
    cost: CostSpec
    grid: TimeGrid
    history: np.ndarray

    @property
    def m(self) -> int:
        return self.grid.delay_steps

    @property
    def dt(self) -> float:
        return self.grid.dt

    @property
    def N(self) -> int:
        return self.grid.n_steps

    def with_grid(self, grid: TimeGrid) -> "ValidatedModel":
        return validate_model(self.params, self.U, self.cost, grid)


def _check_convexity(cost: CostSpec, U: ControlSet) -> None:
    c = cost.c
    if isinstance(c, TabulatedControlCost):
        missing = [u for u in U.values if u not in dict(c.table)]
        if missing:
            raise TabulatedCostOffGrid(f"tabulated cost lacks entries for {missing}")
        f = c.interpolate
    else:
        f = lambda u: float(c(u))  # noqa: E731
    vals = U.sorted_values
    for i, a in enumerate(vals):
        for b in vals[i + 1:]:
            mid = f(0.5 * (a + b))
            chord = 0.5 * (f(a) + f(b))
            if mid > chord + 1e-12 * (1.0 + abs(chord)):
                raise NonConvexCost(
                    f"c fails midpoint convexity on ({a}, {b}): "
                    f"c(mid)={mid:g} > {chord:g}"
                )


def _probe_points(interval, n=21) -> np.ndarray:
    lo, hi = interval
    return np.linspace(float(lo), float(hi), n)


def validate_model(params: ModelParams, U: ControlSet, cost: CostSpec,
                   grid: TimeGrid) -> ValidatedModel:
    """Check every standing assumption and return a sealed model.

    Raises a :class:`ModelError` subclass whose ``hypothesis`` attribute
    names the violated assumption.
    """
    if params.delay_d <= 0:
        raise NonPositiveDelay(f"delay must be positive, got {params.delay_d}")
    if params.horizon_T <= 0:
        raise ModelError(f"horizon must be positive, got {params.horizon_T}",
                         "positive horizon")
    if params.delay_d >= params.horizon_T:
        raise DelayExceedsHorizon(
            f"delay {params.delay_d} must be shorter than horizon {params.horizon_T}"
        )
    if params.sigma1 < 0 or params.sigma2 < 0:
        raise ModelError("volatilities must be non-negative", "non-negative volatilities")
    for name in ("a0", "ad", "b0", "sigma1", "sigma2"):
        if not math.isfinite(getattr(params, name)):
            raise ModelError(f"{name} must be finite", "real coefficients")
    if not isinstance(U, ControlSet):
        U = ControlSet(U)
    if _as_int_steps(params.delay_d, grid.dt) != grid.delay_steps:
        raise DelayNotGridAligned(
            f"delay/dt = {params.delay_d / grid.dt:g} is not the grid's {grid.delay_steps}"
        )
    if not math.isclose(grid.n_steps * grid.dt, params.horizon_T, rel_tol=1e-12):
        raise ModelError(
            f"grid covers {grid.n_steps * grid.dt}, horizon is {params.horizon_T}",
            "grid-aligned horizon",
        )

    _check_convexity(cost, U)

    probes = _probe_points(cost.operating_interval)
    rx = np.asarray(cost.r.dx(probes))
    if np.any(rx <= 0):
        bad = probes[np.argmax(rx <= 0)]
        raise NonIncreasingTerminalReward(
            f"r_x <= 0 at x={bad:g} inside the operating interval {cost.operating_interval}"
        )
    growth = np.abs(cost.l.value(probes)) / (1.0 + np.abs(probes))
    if np.any(growth > cost.growth_bound):
        raise ExcessiveRewardGrowth(
            f"|l(x)|/(1+|x|) reaches {growth.max():g} > bound {cost.growth_bound:g}"
        )

    history = params.history_on(grid)
    if history.shape != (grid.delay_steps + 1,) or not np.all(np.isfinite(history)):
        raise ModelError("history must be finite at every node of [-d, 0]",
                         "history defined on [-d, 0]")
    history.setflags(write=False)
    return ValidatedModel(params=params, U=U, cost=cost, grid=grid, history=history)


def build_model(params: ModelParams, U, cost: CostSpec | None = None,
                dt: float = 0.01) -> ValidatedModel:
    """Convenience wrapper: build the grid from ``dt`` and validate."""
    grid = TimeGrid.build(dt, params.horizon_T, params.delay_d)
    return validate_model(params, U if isinstance(U, ControlSet) else ControlSet(U),
                          cost or CostSpec(), grid)
