"""
Goodwill under delayed advertising noise
========================================

Simulate the goodwill state for a constant advertising rate and look at
how the lagged control enters the diffusion only after the delay.
"""

from dataclasses import replace

import numpy as np

from goodwill.model import (
    ControlSignal, CostSpec, ModelParams, QuadraticControlCost, QuadraticReward, build_model,
)
from goodwill.paths import estimate_cost, sample_brownian, simulate_state

# reference parameters: decay 1, lagged decay 0.5, gain 2, delay 0.5
params = ModelParams(a0=1.0, ad=0.5, b0=2.0, sigma1=0.2, sigma2=0.3,
                     delay_d=0.5, horizon_T=1.0, history=1.0)
cost = CostSpec(c=QuadraticControlCost(1.0, 0.0), l=QuadraticReward(0.2, 0.1),
                r=QuadraticReward(1.0, 0.5), operating_interval=(-1.0, 10.0))
model = build_model(params, [0, 1], cost, dt=0.0125)
print(f"{model.N} steps, delay = {model.m} steps")

u = ControlSignal.constant(model.grid, 1.0)
B = sample_brownian(model.grid, 20_000, seed=0)
S = simulate_state(model, u, B)

# S.x is time-major and starts at -d; the first m + 1 rows are the history
x = S.x[model.m:]
spread = x.std(axis=1)
for t in (0.0, 0.25, 0.5, 0.75, 1.0):
    k = model.grid.index_of(t)
    print(f"t={t:4.2f}  mean x={x[k].mean():.4f}  sd={spread[k]:.4f}")

# before t = d the lagged control is zero, so sigma2 cannot act yet: on
# common noise a run with sigma2 = 0 coincides with the reference until d
quiet = build_model(replace(params, sigma2=0.0), [0, 1], cost, dt=0.0125)
xq = simulate_state(quiet, u, B).x[model.m:]
gap = np.abs(x - xq).max(axis=1)
print("max |x - x(sigma2=0)| up to d:", gap[: model.m + 1].max())
print("max |x - x(sigma2=0)| at T:   ", gap[-1])

J = estimate_cost(model, u, S)
print(f"J(u=1) = {J.mean:.5f} +- {J.std_error:.5f}")
