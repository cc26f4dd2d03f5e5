"""Demand sampling and Newton-Raphson power flow for ground-truth states.

Generator buses are PV buses with their case voltage set point.  Non-slack
generators keep their nominal active set point scaled by the ratio of total
sampled demand to total nominal demand; the slack bus absorbs the rest.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DivergenceError
from .grid import BusNetwork
from .measurements import MeasurementModel, MeasurementSpec, StateVector

MISMATCH_TOL = 1e-8
MAX_ITERS = 50


@dataclass(frozen=True)
class DemandScenario:
    p_demand: np.ndarray
    q_demand: np.ndarray
    variability: float
    seed: int | None


def sample_demand(network: BusNetwork, variability: float, rng_seed) -> DemandScenario:
    """Perturb nominal demands by a per-bus factor ``1 + U[-v, v]``.

    The same factor scales P and Q of a bus (constant power factor).  The
    slack bus keeps its nominal demand.
    """
    if not 0 <= variability < 1:
        raise ConfigurationError(f"variability must lie in [0, 1), got {variability}")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    p0 = np.array([b.p_demand for b in network.buses])
    q0 = np.array([b.q_demand for b in network.buses])
    factor = 1.0 + rng.uniform(-variability, variability, size=network.n_bus)
    factor[0] = 1.0
    seed = rng_seed if isinstance(rng_seed, (int, np.integer)) else None
    return DemandScenario(p0 * factor, q0 * factor, variability, seed)


def nominal_demand(network: BusNetwork) -> DemandScenario:
    return DemandScenario(np.array([b.p_demand for b in network.buses]),
                          np.array([b.q_demand for b in network.buses]), 0.0, None)


def _specified_injections(network: BusNetwork, scenario: DemandScenario):
    p_gen = np.array([b.p_gen for b in network.buses])
    nominal_total = sum(b.p_demand for b in network.buses)
    ratio = scenario.p_demand.sum() / nominal_total if nominal_total else 1.0
    p_spec = p_gen * ratio - scenario.p_demand
    q_spec = -scenario.q_demand
    return p_spec, q_spec


def solve_power_flow(network: BusNetwork, scenario: DemandScenario, *,
                     tol: float = MISMATCH_TOL, max_iters: int = MAX_ITERS) -> StateVector:
    """Newton-Raphson power flow from a flat start (PV set points applied)."""
    nb = network.n_bus
    kinds = [b.kind for b in network.buses]
    pv = [k for k in range(nb) if kinds[k] == "generator"]
    pq = [k for k in range(nb) if kinds[k] == "load"]
    non_slack = list(range(1, nb))

    specs = ([MeasurementSpec("PInj", k + 1, 1.0) for k in non_slack]
             + [MeasurementSpec("QInj", k + 1, 1.0) for k in pq])
    model = MeasurementModel(network, specs)
    p_spec, q_spec = _specified_injections(network, scenario)
    target = np.concatenate([p_spec[non_slack], q_spec[pq]])

    x = np.concatenate([np.ones(nb), np.zeros(nb - 1)])
    x[0] = network.buses[0].v_set
    for k in pv:
        x[k] = network.buses[k].v_set
    # unknowns: theta at non-slack buses, V at PQ buses
    cols = np.array([nb + k - 1 for k in non_slack] + pq, dtype=int)

    norm = np.inf
    for _ in range(max_iters + 1):
        mismatch = target - model.h(x)
        norm = float(np.max(np.abs(mismatch))) if mismatch.size else 0.0
        if not np.isfinite(norm):
            break
        if norm <= tol:
            return StateVector.from_array(x)
        jac = model.jacobian(x)[:, cols]
        try:
            x[cols] += np.linalg.solve(jac, mismatch)
        except np.linalg.LinAlgError:
            break
    raise DivergenceError(f"power flow did not converge (max mismatch {norm:.3e})", last_norm=norm)
