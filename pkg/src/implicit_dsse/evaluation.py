"""Error metrics, derived quantities, run aggregation and CSV tables."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ContractViolation
from .grid import BusNetwork
from .measurements import MeasurementModel, MeasurementSpec, StateVector

METRICS = ("rmse_v", "rmse_theta", "rmse_p", "rmse_q", "rmse_pf", "rmse_qf")
GAMMA_GRID = (0.1, 0.5, 0.9)
# metadata that must agree before runs can be pooled
_CELL_KEYS = ("network", "scenario", "variability", "reference")

_models: dict = {}


def _derived_model(network: BusNetwork) -> MeasurementModel:
    key = (id(network), network.digest())
    if key not in _models:
        nb = network.n_bus
        specs = ([MeasurementSpec("PInj", k, 1.0) for k in range(1, nb + 1)]
                 + [MeasurementSpec("QInj", k, 1.0) for k in range(1, nb + 1)]
                 + [MeasurementSpec("PFlow", (br.from_bus, br.to_bus), 1.0) for br in network.branches]
                 + [MeasurementSpec("QFlow", (br.from_bus, br.to_bus), 1.0) for br in network.branches])
        _models[key] = MeasurementModel(network, specs)
    return _models[key]


def _stack(states) -> np.ndarray:
    if isinstance(states, np.ndarray):
        return np.atleast_2d(states).astype(float)
    return np.array([s.to_array() if isinstance(s, StateVector) else np.asarray(s, dtype=float)
                     for s in states])


def derived_quantities(state, network: BusNetwork):
    """(p_inj, q_inj, p_flow, q_flow) for one state or a stack of states.

    Flows are taken at the from-end of every branch in network order.
    """
    x = state.to_array() if isinstance(state, StateVector) else np.asarray(state, dtype=float)
    out = _derived_model(network).h(x)
    nb, nl = network.n_bus, network.n_branch
    cuts = np.cumsum([nb, nb, nl])
    return tuple(np.split(out, cuts, axis=-1))


@dataclass
class MetricsReport:
    """Six RMSE values (mean over runs) plus per-run values and metadata.

    ``std`` is filled only when at least two runs were pooled.
    """

    rmse_v: float
    rmse_theta: float
    rmse_p: float
    rmse_q: float
    rmse_pf: float
    rmse_qf: float
    runs: list = field(default_factory=list)
    std: dict | None = None
    metadata: dict = field(default_factory=dict)

    def values(self) -> dict:
        return {k: getattr(self, k) for k in METRICS}

    @property
    def method(self):
        return self.metadata.get("method")

    @property
    def gamma(self):
        return self.metadata.get("gamma")


def rmse_report(estimates, truths, network: BusNetwork, metadata=None) -> MetricsReport:
    """RMSE over all samples and entries per quantity; angles in radians.

    The angle error covers all N buses (the slack contributes zero).
    """
    est, ref = _stack(estimates), _stack(truths)
    if est.size == 0 or ref.size == 0:
        raise ConfigurationError("rmse_report needs at least one sample")
    if est.shape != ref.shape:
        raise ContractViolation(f"estimate/truth shapes differ: {est.shape} vs {ref.shape}")
    if est.shape[1] != network.n_state:
        raise ContractViolation("state length does not match the network")
    nb = network.n_bus
    vals = {
        "rmse_v": _rmse(est[:, :nb] - ref[:, :nb]),
        # pad the slack angle so the mean runs over N buses
        "rmse_theta": float(np.sqrt(np.sum((est[:, nb:] - ref[:, nb:]) ** 2) / (est.shape[0] * nb))),
    }
    d_est = derived_quantities(est, network)
    d_ref = derived_quantities(ref, network)
    for key, a, b in zip(("rmse_p", "rmse_q", "rmse_pf", "rmse_qf"), d_est, d_ref):
        vals[key] = _rmse(a - b)
    meta = dict(metadata or {})
    meta.setdefault("network", network.name)
    meta.setdefault("seeds", [])
    return MetricsReport(**vals, runs=[dict(vals)], metadata=meta)


def _rmse(err):
    return float(np.sqrt(np.mean(err ** 2))) if err.size else 0.0


def _gamma_key(g):
    return None if g is None else float(g)


@dataclass
class ImprovementRow:
    network: str
    scenario: str
    variability: float
    reference: str | None
    ps_rmse_v: float
    il_rmse_v: float
    best_gamma: float | None
    improvement_pct: float
    n_runs: int


@dataclass
class Aggregate:
    reports: list
    improvement: list


def improvement_pct(ps_rmse_v: float, il_rmse_v: float) -> float:
    return 100.0 * (ps_rmse_v - il_rmse_v) / ps_rmse_v


def aggregate_runs(reports) -> Aggregate:
    """Pool per-run reports of one cell by (method, gamma); mean and sample std.

    The improvement row compares PS against the IL gamma with the lowest
    mean RMSE_V.
    """
    reports = list(reports)
    if not reports:
        raise ConfigurationError("no reports to aggregate")
    cell = {k: reports[0].metadata.get(k) for k in _CELL_KEYS}
    for r in reports[1:]:
        other = {k: r.metadata.get(k) for k in _CELL_KEYS}
        if other != cell:
            raise ContractViolation(f"cannot pool runs from different cells: {cell} vs {other}")

    groups: dict = {}
    for r in reports:
        key = (r.metadata.get("method"), _gamma_key(r.metadata.get("gamma")))
        groups.setdefault(key, []).append(r)

    pooled = []
    for (method, gamma), rs in sorted(groups.items(), key=lambda kv: (str(kv[0][0]), kv[0][1] or -1.0)):
        runs = [run for r in rs for run in r.runs]
        seeds = [s for r in rs for s in r.metadata.get("seeds", [])]
        table = np.array([[run[k] for k in METRICS] for run in runs])
        mean = table.mean(axis=0)
        std = dict(zip(METRICS, table.std(axis=0, ddof=1).tolist())) if len(runs) >= 2 else None
        meta = {**cell, "method": method, "gamma": gamma, "seeds": seeds}
        pooled.append(MetricsReport(*mean.tolist(), runs=runs, std=std, metadata=meta))

    improvement = []
    ps = [r for r in pooled if r.method == "PS"]
    il = [r for r in pooled if r.method == "IL"]
    if ps and il:
        best = min(il, key=lambda r: r.rmse_v)
        improvement.append(ImprovementRow(
            cell["network"], cell["scenario"], cell["variability"], cell["reference"],
            ps[0].rmse_v, best.rmse_v, best.gamma, improvement_pct(ps[0].rmse_v, best.rmse_v),
            len(ps[0].runs)))
    return Aggregate(pooled, improvement)


# -- CSV -------------------------------------------------------------------

METRIC_COLUMNS = ["method", "network", "scenario", "variability", "gamma", "reference", "seeds", "n_runs"]
for _k in METRICS:
    METRIC_COLUMNS += [f"{_k}_mean", f"{_k}_std"]
    if _k == "rmse_theta":
        METRIC_COLUMNS += ["rmse_theta_deg_mean", "rmse_theta_deg_std"]

IMPROVEMENT_COLUMNS = ["network", "scenario", "variability", "reference", "ps_rmse_v",
                       "best_il_rmse_v", "best_gamma", "improvement_pct", "n_runs"]


def _fmt(x):
    if x is None or x == "":
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(row.get(c)) for c in columns])
    return buf.getvalue()


def _atomic_write(path, text):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def report_row(r: MetricsReport) -> dict:
    m = r.metadata
    row = {"method": m.get("method"), "network": m.get("network"), "scenario": m.get("scenario"),
           "variability": m.get("variability"), "gamma": m.get("gamma"), "reference": m.get("reference"),
           "seeds": " ".join(str(s) for s in m.get("seeds", [])), "n_runs": len(r.runs)}
    for k in METRICS:
        row[f"{k}_mean"] = getattr(r, k)
        row[f"{k}_std"] = None if r.std is None else r.std[k]
    row["rmse_theta_deg_mean"] = float(np.rad2deg(r.rmse_theta))
    row["rmse_theta_deg_std"] = None if r.std is None else float(np.rad2deg(r.std["rmse_theta"]))
    return row


def metrics_csv(reports) -> str:
    return _csv_text(METRIC_COLUMNS, [report_row(r) for r in reports])


def improvement_csv(rows) -> str:
    out = []
    for r in rows:
        out.append({"network": r.network, "scenario": r.scenario, "variability": r.variability,
                    "reference": r.reference, "ps_rmse_v": r.ps_rmse_v, "best_il_rmse_v": r.il_rmse_v,
                    "best_gamma": r.best_gamma, "improvement_pct": r.improvement_pct, "n_runs": r.n_runs})
    return _csv_text(IMPROVEMENT_COLUMNS, out)


def write_metrics_csv(path, reports):
    _atomic_write(path, metrics_csv(reports))


def write_improvement_csv(path, rows):
    _atomic_write(path, improvement_csv(rows))


def read_metrics_csv(path) -> list:
    """Load per-run reports written by :func:`write_metrics_csv`.

    Each row becomes a single-run report; pooled rows keep only their mean.
    """
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            vals = {k: float(row[f"{k}_mean"]) for k in METRICS}
            gamma = float(row["gamma"]) if row.get("gamma") else None
            meta = {"method": row["method"], "network": row["network"], "scenario": row["scenario"],
                    "variability": float(row["variability"]), "gamma": gamma,
                    "reference": row.get("reference") or None,
                    "seeds": [int(s) for s in row.get("seeds", "").split()]}
            out.append(MetricsReport(**vals, runs=[dict(vals)], metadata=meta))
    return out
