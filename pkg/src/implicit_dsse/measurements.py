"""Measurement specifications, the AC measurement function h(x) and its Jacobian.

States are handled in flattened form ``x = [V_1..V_N, theta_2..theta_N]``
(length ``n = 2N - 1``); every evaluator also accepts a stacked batch of
shape ``(B, n)``.  Angles are in radians throughout.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .grid import BusNetwork

KINDS = ("V", "Theta", "PInj", "QInj", "PFlow", "QFlow")
BUS_KINDS = ("V", "Theta", "PInj", "QInj")
FLOW_KINDS = ("PFlow", "QFlow")

SIGMA_V = 1e-3
SIGMA_THETA = np.deg2rad(0.1)
SIGMA_POWER = 1e-2

SCENARIOS = {
    "HIG": "ieee30", "MED": "ieee30", "LOW": "ieee30",
    "BIF": "ieee33", "END": "ieee33", "PMU": "ieee33",
}


@dataclass(frozen=True)
class StateVector:
    v: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.v, dtype=float)
        theta = np.asarray(self.theta, dtype=float)
        if v.shape != theta.shape or v.ndim != 1:
            raise ValueError("v and theta must be 1-D arrays of equal length")
        if theta[0] != 0.0:
            raise ValueError("slack angle must be zero")
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "theta", theta)

    @classmethod
    def flat(cls, n_bus: int) -> "StateVector":
        return cls(np.ones(n_bus), np.zeros(n_bus))

    @classmethod
    def from_array(cls, x) -> "StateVector":
        x = np.asarray(x, dtype=float)
        n_bus = (x.shape[-1] + 1) // 2
        return cls(x[:n_bus].copy(), np.concatenate([[0.0], x[n_bus:]]))

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.v, self.theta[1:]])


def flat_start(network: BusNetwork) -> np.ndarray:
    return np.concatenate([np.ones(network.n_bus), np.zeros(network.n_bus - 1)])


def split_state(x: np.ndarray, n_bus: int) -> tuple[np.ndarray, np.ndarray]:
    """(B, n) flattened states -> (B, N) magnitudes and (B, N) angles."""
    v = x[:, :n_bus]
    theta = np.concatenate([np.zeros((x.shape[0], 1)), x[:, n_bus:]], axis=1)
    return v, theta


@dataclass(frozen=True)
class MeasurementSpec:
    kind: str
    location: int | tuple[int, int]
    sigma: float

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown measurement kind {self.kind!r}")
        if not self.sigma > 0:
            raise ConfigurationError(f"{self.kind}@{self.location}: sigma must be positive")
        if self.kind in FLOW_KINDS:
            loc = tuple(int(b) for b in self.location)
            if len(loc) != 2:
                raise ConfigurationError(f"{self.kind}: location must be a (from, to) pair")
            object.__setattr__(self, "location", loc)
        else:
            object.__setattr__(self, "location", int(self.location))

    def to_dict(self) -> dict:
        loc = list(self.location) if isinstance(self.location, tuple) else self.location
        return {"kind": self.kind, "location": loc, "sigma": self.sigma}


@dataclass(frozen=True)
class MeasurementPlan:
    available: tuple[MeasurementSpec, ...]
    delayed: tuple[MeasurementSpec, ...]
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "available", tuple(self.available))
        object.__setattr__(self, "delayed", tuple(self.delayed))

    @property
    def specs(self) -> tuple[MeasurementSpec, ...]:
        return self.available + self.delayed

    @property
    def m_a(self) -> int:
        return len(self.available)

    @property
    def m_d(self) -> int:
        return len(self.delayed)

    @property
    def m(self) -> int:
        return self.m_a + self.m_d

    @property
    def sigma_vector(self) -> np.ndarray:
        return np.array([s.sigma for s in self.specs])

    def to_dict(self) -> dict:
        return {"name": self.name,
                "available": [s.to_dict() for s in self.available],
                "delayed": [s.to_dict() for s in self.delayed]}

    @classmethod
    def from_dict(cls, doc: dict) -> "MeasurementPlan":
        try:
            avail = [MeasurementSpec(**rec) for rec in doc["available"]]
            delayed = [MeasurementSpec(**rec) for rec in doc["delayed"]]
        except (KeyError, TypeError) as exc:
            raise ConfigurationError(f"malformed plan document: {exc}") from exc
        return cls(avail, delayed, name=doc.get("name", "custom"))


def load_plan(path) -> MeasurementPlan:
    with open(Path(path)) as fh:
        return MeasurementPlan.from_dict(json.load(fh))


class MeasurementModel:
    """Compiled evaluator of h(x) and J(x) for a fixed spec list on a network.

    Rows follow the order of ``specs``; Jacobian columns follow
    ``[V_1..V_N, theta_2..theta_N]``.
    """

    def __init__(self, network: BusNetwork, specs):
        self.network = network
        self.specs = tuple(specs.specs if isinstance(specs, MeasurementPlan) else specs)
        self.n_bus = network.n_bus
        self.n = network.n_state
        self.m = len(self.specs)
        g, b = network.g_matrix, network.b_matrix

        rows = {k: [] for k in KINDS}
        idx = {k: [] for k in KINDS}
        for r, spec in enumerate(self.specs):
            rows[spec.kind].append(r)
            if spec.kind in FLOW_KINDS:
                i, j = spec.location
                try:
                    k = network.branch_index(i, j)
                except KeyError:
                    raise KeyError(f"{spec.kind}: no branch between buses {i} and {j}") from None
                idx[spec.kind].append((i - 1, j - 1, network.branches[k].b_shunt))
            else:
                if not 1 <= spec.location <= self.n_bus:
                    raise KeyError(f"{spec.kind}: bus {spec.location} does not exist")
                if spec.kind == "Theta" and spec.location == 1:
                    raise ConfigurationError("the slack angle is fixed at zero and cannot be measured")
                idx[spec.kind].append(spec.location - 1)
        self._rows = {k: np.array(v, dtype=int) for k, v in rows.items()}
        self._bus = {k: np.array(idx[k], dtype=int) for k in BUS_KINDS}
        self._flow = {}
        for k in FLOW_KINDS:
            arr = idx[k]
            fi = np.array([a[0] for a in arr], dtype=int)
            ti = np.array([a[1] for a in arr], dtype=int)
            bsh = np.array([a[2] for a in arr], dtype=float)
            self._flow[k] = (fi, ti, g[fi, ti], b[fi, ti], bsh)
        self._needs_injection = bool(len(self._rows["PInj"]) or len(self._rows["QInj"]))

        # directed off-diagonal admittance pattern
        ei, ej = np.nonzero((g != 0) | (b != 0))
        keep = ei != ej
        ei, ej = ei[keep], ej[keep]
        self._edges = (ei, ej, g[ei, ej], b[ei, ej])
        self._g_diag = np.diag(g).copy()
        self._b_diag = np.diag(b).copy()
        self._scatter = np.zeros((len(ei), self.n_bus))
        self._scatter[np.arange(len(ei)), ei] = 1.0
        # Jacobian scatter plan for injection rows: (row, edge, V column, theta column or -1)
        self._inj_plan = {}
        for kind in ("PInj", "QInj"):
            rr, ee = [], []
            for r, bus in zip(self._rows[kind], self._bus[kind]):
                e = np.flatnonzero(ei == bus)
                rr.append(np.full(len(e), r))
                ee.append(e)
            rr = np.concatenate(rr) if rr else np.zeros(0, dtype=int)
            ee = np.concatenate(ee) if ee else np.zeros(0, dtype=int)
            th = ej[ee] > 0
            self._inj_plan[kind] = (rr, ee, ej[ee], th, self.n_bus + ej[ee][th] - 1)

    @property
    def jacobian_pattern(self) -> np.ndarray:
        """Boolean (m, n) mask of structurally nonzero Jacobian entries."""
        if getattr(self, "_pattern", None) is None:
            rng = np.random.default_rng(12345)
            nb = self.n_bus
            x = np.concatenate([rng.uniform(0.9, 1.1, (2, nb)), rng.uniform(-0.3, 0.3, (2, nb - 1))], axis=1)
            self._pattern = np.any(self.jacobian(x) != 0, axis=0)
        return self._pattern

    # -- helpers -----------------------------------------------------------
    def _prep(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        if x.shape[-1] != self.n:
            raise ValueError(f"state has length {x.shape[-1]}, expected {self.n}")
        return np.atleast_2d(x), single

    def _injections(self, v, theta):
        """P, Q at every bus plus per-edge A = G cos + B sin, C = G sin - B cos."""
        ei, ej, ge, be = self._edges
        t = theta[:, ei] - theta[:, ej]
        c, s = np.cos(t), np.sin(t)
        a_e = ge * c + be * s
        c_e = ge * s - be * c
        vv = v[:, ei] * v[:, ej]
        v2 = v * v
        p = v2 * self._g_diag + (vv * a_e) @ self._scatter
        q = -v2 * self._b_diag + (vv * c_e) @ self._scatter
        return p, q, a_e, c_e, vv

    def _flows(self, kind, v, theta):
        fi, ti, gij, bij, bsh = self._flow[kind]
        vi, vj = v[:, fi], v[:, ti]
        t = theta[:, fi] - theta[:, ti]
        c, s = np.cos(t), np.sin(t)
        return fi, ti, gij, bij, bsh, vi, vj, c, s

    # -- evaluation --------------------------------------------------------
    def h(self, x) -> np.ndarray:
        return self.h_and_jacobian(x, jacobian=False)[0]

    def jacobian(self, x) -> np.ndarray:
        return self.h_and_jacobian(x, value=False)[1]

    def h_and_jacobian(self, x, value=True, jacobian=True):
        """Evaluate h(x) and/or J(x) sharing the trigonometric work."""
        x2, single = self._prep(x)
        nb = self.n_bus
        bsz = x2.shape[0]
        v, theta = split_state(x2, nb)
        out = jac = None
        if value:
            out = np.empty((bsz, self.m))
            out[:, self._rows["V"]] = v[:, self._bus["V"]]
            out[:, self._rows["Theta"]] = theta[:, self._bus["Theta"]]
        if jacobian:
            jac = np.zeros((bsz, self.m, self.n))
            jac[:, self._rows["V"], self._bus["V"]] = 1.0
            jac[:, self._rows["Theta"], nb + self._bus["Theta"] - 1] = 1.0

        if self._needs_injection:
            p, q, a_e, c_e, vv = self._injections(v, theta)
            if value:
                out[:, self._rows["PInj"]] = p[:, self._bus["PInj"]]
                out[:, self._rows["QInj"]] = q[:, self._bus["QInj"]]
            if jacobian:
                self._injection_jacobian(jac, v, p, q, a_e, c_e, vv)

        for kind in FLOW_KINDS:
            rows = self._rows[kind]
            if not len(rows):
                continue
            fi, ti, gij, bij, bsh, vi, vj, c, s = self._flows(kind, v, theta)
            gc_bs = gij * c + bij * s
            gs_bc = gij * s - bij * c
            if kind == "PFlow":
                val = vi * vj * gc_bs - gij * vi ** 2
                d_thi = -vi * vj * gs_bc
                d_vi = vj * gc_bs - 2 * gij * vi
                d_vj = vi * gc_bs
            else:
                val = vi * vj * gs_bc + vi ** 2 * (bij - bsh / 2)
                d_thi = vi * vj * gc_bs
                d_vi = vj * gs_bc + 2 * vi * (bij - bsh / 2)
                d_vj = vi * gs_bc
            if value:
                out[:, rows] = val
            if jacobian:
                jac[:, rows, fi] = d_vi
                jac[:, rows, ti] = d_vj
                mf = fi > 0
                jac[:, rows[mf], nb + fi[mf] - 1] = d_thi[:, mf]
                mt = ti > 0
                jac[:, rows[mt], nb + ti[mt] - 1] = -d_thi[:, mt]
        if single:
            out = None if out is None else out[0]
            jac = None if jac is None else jac[0]
        return out, jac

    def _injection_jacobian(self, jac, v, p, q, a_e, c_e, vv):
        nb = self.n_bus
        vi = v[:, self._edges[0]]
        for kind in ("PInj", "QInj"):
            rows = self._rows[kind]
            if not len(rows):
                continue
            buses = self._bus[kind]
            vb = v[:, buses]
            # off-diagonal terms
            if kind == "PInj":
                d_th, d_v = vv * c_e, vi * a_e
            else:
                d_th, d_v = -vv * a_e, vi * c_e
            rr, ee, vcol, th, thcol = self._inj_plan[kind]
            jac[:, rr, vcol] = d_v[:, ee]
            jac[:, rr[th], thcol] = d_th[:, ee[th]]
            # diagonal terms
            pb, qb = p[:, buses], q[:, buses]
            gd, bd = self._g_diag[buses], self._b_diag[buses]
            if kind == "PInj":
                dv_diag = vb * gd + pb / vb
                dth_diag = -qb - vb ** 2 * bd
            else:
                dv_diag = -vb * bd + qb / vb
                dth_diag = pb - vb ** 2 * gd
            jac[:, rows, buses] = dv_diag
            ns = buses > 0
            jac[:, rows[ns], nb + buses[ns] - 1] = dth_diag[:, ns]


def _as_array(state) -> np.ndarray:
    return state.to_array() if isinstance(state, StateVector) else np.asarray(state, dtype=float)


def eval_h(state, specs, network: BusNetwork) -> np.ndarray:
    """Measurement vector h(x) for a plan or spec list."""
    return MeasurementModel(network, specs).h(_as_array(state))


def eval_jacobian(state, specs, network: BusNetwork) -> np.ndarray:
    """Analytic Jacobian dh/dx with the slack-angle column omitted."""
    return MeasurementModel(network, specs).jacobian(_as_array(state))


# -- scenarios -------------------------------------------------------------

def _v(buses):
    return [MeasurementSpec("V", b, SIGMA_V) for b in buses]


def _theta(buses):
    return [MeasurementSpec("Theta", b, SIGMA_THETA) for b in buses]


def _injections_all(network):
    return ([MeasurementSpec("PInj", b.id, SIGMA_POWER) for b in network.buses]
            + [MeasurementSpec("QInj", b.id, SIGMA_POWER) for b in network.buses])


def _flows_all(network):
    return ([MeasurementSpec("PFlow", (br.from_bus, br.to_bus), SIGMA_POWER) for br in network.branches]
            + [MeasurementSpec("QFlow", (br.from_bus, br.to_bus), SIGMA_POWER) for br in network.branches])


def _branch_flows(network, numbers):
    out = []
    for kind in FLOW_KINDS:
        for k in numbers:
            br = network.branches[k - 1]
            out.append(MeasurementSpec(kind, (br.from_bus, br.to_bus), SIGMA_POWER))
    return out


def make_plan(scenario: str, network: BusNetwork) -> MeasurementPlan:
    """Build one of the HIG/MED/LOW (30-bus) or BIF/END/PMU (33-bus) plans."""
    if scenario not in SCENARIOS:
        raise ConfigurationError(f"unknown scenario {scenario!r}; expected one of {sorted(SCENARIOS)}")
    family = SCENARIOS[scenario]
    expected_bus = {"ieee30": 30, "ieee33": 33}[family]
    if network.n_bus != expected_bus or (family == "ieee33") != network.is_radial:
        raise ConfigurationError(f"scenario {scenario} requires the {family} network, got {network.name}")

    if family == "ieee30":
        v_buses = {
            "HIG": [1, 2, 5, 6, 8, 13, 19, 22, 28],
            "MED": [1, 2, 5, 6, 8, 28],
            "LOW": [1, 12, 21],
        }[scenario]
        available = _v(v_buses) + _theta([b for b in v_buses if b != 1])
        delayed = _injections_all(network) + _flows_all(network)
    else:
        substation = _v([1]) + _branch_flows(network, [1])
        extra = {
            "BIF": _branch_flows(network, [18, 22, 25]),
            "END": _v([18, 22, 25, 33]),
            "PMU": _v([6]) + _theta([6]),
        }[scenario]
        available = substation + extra
        delayed = _injections_all(network)
    return MeasurementPlan(available, delayed, name=scenario)


def add_noise(z_clean, sigma_vector, rng_seed) -> np.ndarray:
    """Add independent zero-mean Gaussian noise with per-channel std."""
    z_clean = np.asarray(z_clean, dtype=float)
    sigma = np.asarray(sigma_vector, dtype=float)
    if sigma.shape[-1] != z_clean.shape[-1]:
        raise ConfigurationError("sigma_vector length does not match the measurement vector")
    if np.any(~(sigma > 0)):
        raise ConfigurationError("all noise standard deviations must be positive")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    return z_clean + sigma * rng.standard_normal(z_clean.shape)
