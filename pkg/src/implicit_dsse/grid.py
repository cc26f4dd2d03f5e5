"""Network topology, case-file parsing and bus admittance matrix assembly.

Case files are JSON documents::

    {"base_mva": 10.0,
     "buses": [{"id": 1, "kind": "slack", "p_demand": 0.0, "q_demand": 0.0,
                "shunt_b": 0.0, "v_set": 1.0}, ...],
     "branches": [{"from": 1, "to": 2, "r": 0.0057, "x": 0.0029,
                   "b_shunt": 0.0}, ...]}

All electrical values are per-unit on ``base_mva``.  ``v_set`` (voltage set
point of slack/generator buses, default 1.0) and ``p_gen`` (nominal active
generation, default 0.0) are optional.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import CaseParseError, NetworkValidationError, SingularBranchError

BUS_KINDS = ("slack", "generator", "load")
BUNDLED_CASES = ("ieee30", "ieee33")


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str
    p_demand: float = 0.0
    q_demand: float = 0.0
    shunt_b: float = 0.0
    v_set: float = 1.0
    p_gen: float = 0.0

    def __post_init__(self):
        if self.kind not in BUS_KINDS:
            raise NetworkValidationError(f"bus {self.id}: unknown kind {self.kind!r}")
        for name in ("p_demand", "q_demand", "shunt_b", "v_set", "p_gen"):
            if not np.isfinite(getattr(self, name)):
                raise NetworkValidationError(f"bus {self.id}: {name} is not finite")
        if self.v_set <= 0:
            raise NetworkValidationError(f"bus {self.id}: v_set must be positive")


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_shunt: float = 0.0

    def __post_init__(self):
        if self.from_bus == self.to_bus:
            raise NetworkValidationError(f"branch {self.from_bus}-{self.to_bus} is a self loop")
        if self.r < 0:
            raise NetworkValidationError(f"branch {self.from_bus}-{self.to_bus}: negative resistance")
        if not (np.isfinite(self.r) and np.isfinite(self.x) and np.isfinite(self.b_shunt)):
            raise NetworkValidationError(f"branch {self.from_bus}-{self.to_bus}: non-finite parameter")


def build_admittance(network) -> tuple[np.ndarray, np.ndarray]:
    """Return (G, B), the real and imaginary parts of the bus admittance matrix.

    Off-diagonal entries are ``-1/(r + jx)`` per branch; the diagonal collects
    the incident series admittances, half of each line-charging susceptance
    and the bus shunt susceptance.
    """
    n = len(network.buses)
    y = np.zeros((n, n), dtype=complex)
    for br in network.branches:
        z = complex(br.r, br.x)
        if z == 0:
            raise SingularBranchError(f"branch {br.from_bus}-{br.to_bus} has zero impedance")
        ys = 1.0 / z
        i, j = br.from_bus - 1, br.to_bus - 1
        y[i, j] -= ys
        y[j, i] -= ys
        y[i, i] += ys + 0.5j * br.b_shunt
        y[j, j] += ys + 0.5j * br.b_shunt
    for k, bus in enumerate(network.buses):
        y[k, k] += 1j * bus.shunt_b
    return y.real.copy(), y.imag.copy()


@dataclass(frozen=True, eq=False)
class BusNetwork:
    """Immutable network model with cached admittance matrices.

    Buses are numbered 1..N with the slack bus at index 1; ``original_ids``
    keeps the ids used in the source file.
    """

    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    base_mva: float = 100.0
    name: str = "network"
    original_ids: tuple[int, ...] = ()
    g_matrix: np.ndarray = field(init=False, repr=False)
    b_matrix: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        if not self.original_ids:
            object.__setattr__(self, "original_ids", tuple(b.id for b in self.buses))
        self._validate()
        g, b = build_admittance(self)
        g.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "g_matrix", g)
        object.__setattr__(self, "b_matrix", b)

    def _validate(self):
        n = len(self.buses)
        if n == 0:
            raise NetworkValidationError("network has no buses")
        if [b.id for b in self.buses] != list(range(1, n + 1)):
            raise NetworkValidationError("bus ids must be contiguous 1..N in order")
        slacks = [b.id for b in self.buses if b.kind == "slack"]
        if len(slacks) != 1:
            raise NetworkValidationError(f"expected exactly one slack bus, found {len(slacks)}")
        if slacks[0] != 1:
            raise NetworkValidationError("slack bus must be bus 1")
        if self.base_mva <= 0:
            raise NetworkValidationError("base_mva must be positive")
        seen = set()
        for br in self.branches:
            for end in (br.from_bus, br.to_bus):
                if not 1 <= end <= n:
                    raise NetworkValidationError(f"branch {br.from_bus}-{br.to_bus}: bus {end} does not exist")
            key = frozenset((br.from_bus, br.to_bus))
            if key in seen:
                raise NetworkValidationError(f"parallel branches between {br.from_bus} and {br.to_bus} are not supported")
            seen.add(key)
        if not _is_connected(n, self.branches):
            raise NetworkValidationError("network graph is not connected")

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_branch(self) -> int:
        return len(self.branches)

    @property
    def n_state(self) -> int:
        return 2 * self.n_bus - 1

    @property
    def is_radial(self) -> bool:
        return self.n_branch == self.n_bus - 1

    def branch_index(self, i: int, j: int) -> int:
        """Position of the branch joining buses i and j (either orientation)."""
        for k, br in enumerate(self.branches):
            if (br.from_bus, br.to_bus) in ((i, j), (j, i)):
                return k
        raise KeyError(f"no branch between buses {i} and {j}")

    def digest(self) -> str:
        """Short content hash used in dataset provenance."""
        payload = json.dumps(network_to_dict(self), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


def _is_connected(n, branches) -> bool:
    adj = [[] for _ in range(n)]
    for br in branches:
        adj[br.from_bus - 1].append(br.to_bus - 1)
        adj[br.to_bus - 1].append(br.from_bus - 1)
    seen = {0}
    stack = [0]
    while stack:
        for nb in adj[stack.pop()]:
            if nb not in seen:
                seen.add(nb)
                stack.append(nb)
    return len(seen) == n


def network_to_dict(network: BusNetwork) -> dict:
    return {
        "name": network.name,
        "base_mva": network.base_mva,
        "buses": [
            {"id": b.id, "kind": b.kind, "p_demand": b.p_demand, "q_demand": b.q_demand,
             "shunt_b": b.shunt_b, "v_set": b.v_set, "p_gen": b.p_gen}
            for b in network.buses
        ],
        "branches": [
            {"from": br.from_bus, "to": br.to_bus, "r": br.r, "x": br.x, "b_shunt": br.b_shunt}
            for br in network.branches
        ],
    }


def _field(record, name, where, kind=float, required=True, default=None):
    if name not in record:
        if required:
            raise CaseParseError(f"{where}: missing field '{name}'")
        return default
    value = record[name]
    try:
        if kind is int:
            if isinstance(value, bool) or not float(value).is_integer():
                raise ValueError
            return int(value)
        if kind is float:
            if isinstance(value, bool):
                raise ValueError
            return float(value)
        return kind(value)
    except (TypeError, ValueError):
        raise CaseParseError(f"{where}: field '{name}' has invalid value {value!r}") from None


def network_from_dict(doc: dict, name: str = "network") -> BusNetwork:
    """Validate a case document and build a :class:`BusNetwork`."""
    if not isinstance(doc, dict):
        raise CaseParseError("case root must be a JSON object")
    base_mva = _field(doc, "base_mva", "case")
    raw_buses = doc.get("buses")
    raw_branches = doc.get("branches")
    if not isinstance(raw_buses, list) or not raw_buses:
        raise CaseParseError("case: field 'buses' must be a non-empty list")
    if not isinstance(raw_branches, list):
        raise CaseParseError("case: field 'branches' must be a list")

    parsed = []
    for k, rec in enumerate(raw_buses):
        where = f"buses[{k}]"
        if not isinstance(rec, dict):
            raise CaseParseError(f"{where}: expected an object")
        kind = _field(rec, "kind", where, kind=str)
        if kind not in BUS_KINDS:
            raise CaseParseError(f"{where}: field 'kind' must be one of {BUS_KINDS}, got {kind!r}")
        parsed.append(dict(
            id=_field(rec, "id", where, kind=int),
            kind=kind,
            p_demand=_field(rec, "p_demand", where),
            q_demand=_field(rec, "q_demand", where),
            shunt_b=_field(rec, "shunt_b", where, required=False, default=0.0),
            v_set=_field(rec, "v_set", where, required=False, default=1.0),
            p_gen=_field(rec, "p_gen", where, required=False, default=0.0),
        ))
    ids = [b["id"] for b in parsed]
    if len(set(ids)) != len(ids):
        raise CaseParseError("buses: duplicate bus ids")
    slacks = [b for b in parsed if b["kind"] == "slack"]
    if len(slacks) != 1:
        raise NetworkValidationError(f"expected exactly one slack bus, found {len(slacks)}")

    # file order, except the slack is moved to the front
    ordered = slacks + [b for b in parsed if b["kind"] != "slack"]
    renumber = {b["id"]: k + 1 for k, b in enumerate(ordered)}
    original_ids = tuple(b["id"] for b in ordered)
    buses = tuple(Bus(**{**b, "id": renumber[b["id"]]}) for b in ordered)

    branches = []
    for k, rec in enumerate(raw_branches):
        where = f"branches[{k}]"
        if not isinstance(rec, dict):
            raise CaseParseError(f"{where}: expected an object")
        f = _field(rec, "from", where, kind=int)
        t = _field(rec, "to", where, kind=int)
        for end in (f, t):
            if end not in renumber:
                raise NetworkValidationError(f"{where}: bus {end} does not exist")
        branches.append(Branch(
            from_bus=renumber[f], to_bus=renumber[t],
            r=_field(rec, "r", where), x=_field(rec, "x", where),
            b_shunt=_field(rec, "b_shunt", where, required=False, default=0.0),
        ))
    return BusNetwork(buses=buses, branches=tuple(branches), base_mva=base_mva,
                      name=str(doc.get("name", name)), original_ids=original_ids)


def parse_case(path) -> BusNetwork:
    """Load a case file; bundled case names (``ieee30``, ``ieee33``) are accepted."""
    path_str = str(path)
    stem = path_str[:-5] if path_str.endswith(".case") else path_str
    if stem in BUNDLED_CASES and not Path(path_str).exists():
        text = resources.files("implicit_dsse.cases").joinpath(f"{stem}.case").read_text()
        name = stem
    else:
        p = Path(path_str)
        try:
            text = p.read_text()
        except OSError as exc:
            raise CaseParseError(f"cannot read case file {p}: {exc}") from exc
        name = p.stem
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseParseError(f"{path_str}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    return network_from_dict(doc, name=name)
