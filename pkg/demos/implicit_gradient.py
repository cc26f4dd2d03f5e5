"""Differentiating a WLS estimate with respect to its measurements.

Compares three routes to d x_hat / d z on the 33-bus feeder:
the explicit sensitivity matrix, the adjoint vector-Jacobian product and
finite differences through the full Gauss-Newton solver.

    python demos/implicit_gradient.py
"""

import time

import numpy as np

from implicit_dsse.grid import parse_case
from implicit_dsse.measurements import MeasurementModel, make_plan
from implicit_dsse.powerflow import sample_demand, solve_power_flow
from implicit_dsse.wls import (WlsOptions, weights_from_sigma, wls_adjoint, wls_sensitivity, wls_solve,
                               wls_solve_batch)

net = parse_case("ieee33")
plan = make_plan("PMU", net)
model = MeasurementModel(net, plan)
w = weights_from_sigma(plan.sigma_vector)

x_true = solve_power_flow(net, sample_demand(net, 0.1, 1)).to_array()
z = model.h(x_true)
sol = wls_solve(z, model, w)
print(f"noiseless solve: {sol.iterations} GN iterations, max error {np.max(np.abs(sol.x_hat - x_true)):.1e}")

sens = wls_sensitivity(sol, w)
g = np.random.default_rng(0).normal(size=model.n)
print(f"adjoint vs S^T g: {np.max(np.abs(wls_adjoint(sol, w, g) - sens.T @ g)):.1e}")

# one column by central differences through the solver
k, eps = 5, 1e-6
e = np.zeros(model.m)
e[k] = eps
opts = WlsOptions(max_iters=50, step_tol=1e-14)
fd = (wls_solve(z + e, model, w, sol.x_hat, opts).x_hat - wls_solve(z - e, model, w, sol.x_hat, opts).x_hat) / (2 * eps)
print(f"column {k}: relative FD error {np.linalg.norm(fd - sens[:, k]) / np.linalg.norm(sens[:, k]):.1e}")

# backward cost does not depend on how many forward iterations ran
zb = np.tile(z, (200, 1)) + plan.sigma_vector * np.random.default_rng(1).standard_normal((200, model.m))
gb = np.random.default_rng(2).normal(size=(200, model.n))
for iters in (5, 50):
    batch = wls_solve_batch(zb, model, w, opts=WlsOptions(max_iters=iters, step_tol=0.0))
    t0 = time.perf_counter()
    wls_adjoint(batch, w, gb)
    print(f"K={iters:2d}: backward for 200 samples {1e3 * (time.perf_counter() - t0):.1f} ms")
