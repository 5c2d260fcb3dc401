"""Driving noise and forward Monte Carlo simulation.

All path arrays are time-major: row ``j`` of an extended array holds the
value at time ``(j - m) * dt`` for every path, where ``m`` is the number of
delay steps. Delayed terms are read by the exact index shift ``i - m``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import EnumerationCapExceeded, GridMismatch, StartOffGrid
from .model import (
    ControlSignal,
    SpikeSpec,
    TimeGrid,
    ValidatedModel,
    delayed_delta,
    spike_delta,
)

#: Paths per independently keyed noise block. Fixing it makes each path's
#: increments a function of (seed, path index, step index) only.
BLOCK_SIZE = 4096

TREE_PATH_CAP = 4**8


@dataclass(frozen=True)
class BrownianBatch:
    """Increments of the 2-d Brownian driver, shape (n_steps, n_paths) each.

    ``exact`` marks an enumerated scenario tree: all paths are equally likely,
    so path averages are exact expectations and carry no standard error.
    ``node_ids[i]`` then labels the tree node each path occupies at t_i.
    """

    seed: int
    n_paths: int
    grid: TimeGrid
    dW1: np.ndarray
    dW2: np.ndarray
    exact: bool = False
    node_ids: Optional[np.ndarray] = None

    def W1(self) -> np.ndarray:
        """Cumulative W1 on the grid, shape (n_steps + 1, n_paths)."""
        out = np.zeros((self.grid.n_steps + 1, self.n_paths))
        np.cumsum(self.dW1, axis=0, out=out[1:])
        return out

    def W2(self) -> np.ndarray:
        out = np.zeros((self.grid.n_steps + 1, self.n_paths))
        np.cumsum(self.dW2, axis=0, out=out[1:])
        return out


def block_normals(seed: int, block: int, n_steps: int, stream: int = 0) -> np.ndarray:
    """Standard normals of shape (n_steps, 2, BLOCK_SIZE) for one path block.

    The generator is Philox keyed by (seed, stream, block); drawing in
    (step, component, path) order means a path's first k steps do not depend
    on how many steps are requested.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream), int(block)))
    gen = np.random.Generator(np.random.Philox(ss))
    return gen.standard_normal((n_steps, 2, BLOCK_SIZE))


def sample_brownian(grid: TimeGrid, n_paths: int, seed: int, workers: int = 1,
                    stream: int = 0) -> BrownianBatch:
    """Reproducible N(0, dt) increments for both Brownian components."""
    if n_paths < 1:
        raise ValueError(f"n_paths must be >= 1, got {n_paths}")
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    n_blocks = -(-n_paths // BLOCK_SIZE)
    N = grid.n_steps
    dW1 = np.empty((N, n_paths))
    dW2 = np.empty((N, n_paths))
    scale = math.sqrt(grid.dt)

    def fill(b):
        z = block_normals(seed, b, N, stream)
        lo = b * BLOCK_SIZE
        hi = min(lo + BLOCK_SIZE, n_paths)
        dW1[:, lo:hi] = scale * z[:, 0, : hi - lo]
        dW2[:, lo:hi] = scale * z[:, 1, : hi - lo]

    if workers > 1 and n_blocks > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(fill, range(n_blocks)))
    else:
        for b in range(n_blocks):
            fill(b)
    return BrownianBatch(seed=int(seed), n_paths=n_paths, grid=grid, dW1=dW1, dW2=dW2)


def tree_brownian(grid: TimeGrid, path_cap: int = TREE_PATH_CAP) -> BrownianBatch:
    """Enumerate the 2-point tree: each increment is +/- sqrt(dt) w.p. 1/2.

    Every step branches four ways (two signs per component), giving
    4**n_steps equally likely paths. Path index digits in base 4 (first step
    most significant) encode the branch sequence.
    """
    N = grid.n_steps
    n = 4**N
    if n > path_cap:
        raise EnumerationCapExceeded(f"tree has {n} paths, cap is {path_cap}")
    idx = np.arange(n)
    h = math.sqrt(grid.dt)
    dW1 = np.empty((N, n))
    dW2 = np.empty((N, n))
    node_ids = np.empty((N + 1, n), dtype=np.int64)
    for j in range(N):
        digit = (idx // 4 ** (N - 1 - j)) % 4
        dW1[j] = np.where(digit & 1, h, -h)
        dW2[j] = np.where(digit & 2, h, -h)
    for j in range(N + 1):
        node_ids[j] = idx // 4 ** (N - j)
    return BrownianBatch(seed=0, n_paths=n, grid=grid, dW1=dW1, dW2=dW2,
                         exact=True, node_ids=node_ids)


# ---------------------------------------------------------------------------
# Forward simulation


@dataclass(frozen=True)
class StateBatch:
    """Goodwill paths on [-d, T], shape (m + n_steps + 1, n_paths)."""

    x: np.ndarray
    control: ControlSignal
    driver: BrownianBatch

    @property
    def grid(self) -> TimeGrid:
        return self.driver.grid

    @property
    def n_paths(self) -> int:
        return self.driver.n_paths

    def at(self, i: int) -> np.ndarray:
        """x(t_i) for every path (i may be negative, down to -m)."""
        return self.x[i + self.grid.delay_steps]

    @property
    def terminal(self) -> np.ndarray:
        return self.x[-1]


@dataclass(frozen=True)
class VariationBatch:
    """First (y) and second (z) variations, same layout as StateBatch.x."""

    y: np.ndarray
    z: np.ndarray
    spike: SpikeSpec
    delta_u: np.ndarray


@dataclass(frozen=True)
class AuxBatch:
    """Auxiliary process started at 1 at ``start_s``; rows are t_k .. T."""

    start_s: float
    start_index: int
    paths: np.ndarray


@dataclass(frozen=True)
class CostEstimate:
    mean: float
    std_error: float
    n_paths: int


def _check_grid(model: ValidatedModel, *grids: TimeGrid) -> None:
    for g in grids:
        if g != model.grid:
            raise GridMismatch(f"grid {g} does not match model grid {model.grid}")


def mc_stats(values: np.ndarray, exact: bool = False) -> tuple[float, float]:
    """Sample mean and its standard error (zero for exact tree averages)."""
    values = np.asarray(values, dtype=float)
    mean = float(np.mean(values))
    if exact or values.size < 2:
        return mean, 0.0
    return mean, float(np.std(values, ddof=1) / math.sqrt(values.size))


def _euler_linear(model: ValidatedModel, init: np.ndarray, drift_u: np.ndarray,
                  diff_u: np.ndarray, B: BrownianBatch, with_sigma1: bool = True) -> np.ndarray:
    """Shared Euler loop for dX = [f_i - a0 X - ad X(t-d)] dt + s1 X dW1 + g_i dW2.

    ``init`` holds the m+1 history rows; ``drift_u``/``diff_u`` are the
    per-step deterministic forcing terms f_i and g_i.
    """
    p = model.params
    m, N, dt = model.m, model.N, model.dt
    X = np.empty((m + N + 1, B.n_paths))
    X[: m + 1] = init[:, None]
    s1 = p.sigma1 if with_sigma1 else 0.0
    for i in range(N):
        cur = X[m + i]
        nxt = cur + (drift_u[i] - p.a0 * cur - p.ad * X[i]) * dt
        if s1:
            nxt += s1 * cur * B.dW1[i]
        if diff_u[i]:
            nxt += diff_u[i] * B.dW2[i]
        X[m + i + 1] = nxt
    return X


def simulate_state(model: ValidatedModel, u: ControlSignal, B: BrownianBatch) -> StateBatch:
    """Euler-Maruyama paths of the controlled goodwill equation."""
    _check_grid(model, u.grid, B.grid)
    p = model.params
    x = _euler_linear(model, model.history, p.b0 * u.values,
                      p.sigma2 * u.delayed(), B)
    return StateBatch(x=x, control=u, driver=B)


def simulate_variations(model: ValidatedModel, u: ControlSignal, spike: SpikeSpec,
                        B: BrownianBatch) -> VariationBatch:
    """Euler paths of the first and second variations for a spike.

    y carries the delayed diffusion kick sigma2 du(t-d) dW2; z carries the
    drift b0 du(t). Both start from zero history. du = (u - v) on the window.
    """
    _check_grid(model, u.grid, B.grid)
    p = model.params
    du = spike_delta(u, spike)
    zero_hist = np.zeros(model.m + 1)
    no_forcing = np.zeros(model.N)
    y = _euler_linear(model, zero_hist, no_forcing,
                      p.sigma2 * delayed_delta(du, model.grid), B)
    z = _euler_linear(model, zero_hist, p.b0 * du, no_forcing, B)
    return VariationBatch(y=y, z=z, spike=spike, delta_u=du)


def aux_recursion(model: ValidatedModel, dW1: np.ndarray, scheme: str = "exponential") -> np.ndarray:
    """Auxiliary process from value 1 with zero pre-history.

    ``dW1`` has shape (L, n): the W1 increments after the start time. Returns
    shape (L + 1, n). On the first delay segment the "exponential" scheme is
    the closed form exp((-a0 - s1^2/2)(t - s) + s1 (W1(t) - W1(s))); later
    steps multiply that one-step factor into (y - ad dt y(t-d)). The "euler"
    scheme is plain Euler-Maruyama throughout.
    """
    p = model.params
    m, dt = model.m, model.dt
    L, n = dW1.shape
    Y = np.zeros((m + L + 1, n))
    Y[m] = 1.0
    if scheme == "exponential":
        drift = -p.a0 - 0.5 * p.sigma1**2
        first = min(m, L)
        if first:
            t = dt * np.arange(1, first + 1)[:, None]
            Y[m + 1: m + first + 1] = np.exp(drift * t + p.sigma1 * np.cumsum(dW1[:first], axis=0))
        for j in range(first, L):
            factor = np.exp(drift * dt + p.sigma1 * dW1[j])
            Y[m + j + 1] = factor * (Y[m + j] - p.ad * dt * Y[j])
    elif scheme == "euler":
        for j in range(L):
            cur = Y[m + j]
            Y[m + j + 1] = cur + (-p.a0 * cur - p.ad * Y[j]) * dt + p.sigma1 * cur * dW1[j]
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    return Y[m:]


def simulate_auxiliary(model: ValidatedModel, s: float, B: BrownianBatch,
                       scheme: str = "exponential") -> AuxBatch:
    """Auxiliary process started at 1 at grid time s, driven by B's W1."""
    _check_grid(model, B.grid)
    k = model.grid.index_of(s)
    if k is None or k >= model.N:
        raise StartOffGrid(f"start time {s} is not a grid node in [0, T)")
    return AuxBatch(start_s=k * model.dt, start_index=k,
                    paths=aux_recursion(model, B.dW1[k:], scheme))


def pathwise_cost(model: ValidatedModel, u: ControlSignal, x: np.ndarray) -> np.ndarray:
    """Per-path cost sum_i dt (c(u_i) - l(x_i)) - r(x_N), left-endpoint rule."""
    m, dt = model.m, model.dt
    cost = model.cost
    control_part = dt * float(np.sum(cost.c(u.values)))
    running = dt * np.sum(cost.l.value(x[m:-1]), axis=0)
    return control_part - running - cost.r.value(x[-1])


def estimate_cost(model: ValidatedModel, u: ControlSignal, S: StateBatch) -> CostEstimate:
    """Monte Carlo estimate of J(u) with its standard error."""
    _check_grid(model, u.grid, S.grid)
    if not np.array_equal(u.values, S.control.values):
        raise ValueError("state batch was simulated under a different control")
    mean, se = mc_stats(pathwise_cost(model, u, S.x), S.driver.exact)
    return CostEstimate(mean=mean, std_error=se, n_paths=S.n_paths)
