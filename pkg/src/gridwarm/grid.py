"""Grid data model, case-file readers and nodal admittance assembly.

All electrical quantities are stored in per-unit on ``NetworkCase.mva_base``.
Buses are indexed densely from 0; the original MATPOWER bus numbers are kept
in ``NetworkCase.bus_numbers``.
"""
from __future__ import annotations

import dataclasses
import enum
import json
import re
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources

import numpy as np
import scipy.sparse as sp

FORMAT_VERSION = 1


class CaseError(ValueError):
    """Malformed or inconsistent case data."""


class BusKind(str, enum.Enum):
    SLACK = "Slack"
    PV = "PV"
    PQ = "PQ"


@dataclass(frozen=True)
class Bus:
    id: int
    kind: BusKind
    shunt_b: float = 0.0
    shunt_g: float = 0.0
    base_kv: float = 0.0


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    g: float
    b: float
    b_sh: float = 0.0
    tap: float = 1.0
    status: bool = True


@dataclass(frozen=True)
class Generator:
    bus: int
    p_set: float
    v_set: float = 1.0
    p_max: float = 0.0
    participation: float = 0.0
    q_set: float = 0.0
    status: bool = True


@dataclass(frozen=True)
class Load:
    bus: int
    p: float
    q: float


@dataclass(frozen=True, eq=True)
class NetworkCase:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]
    loads: tuple[Load, ...]
    mva_base: float = 100.0
    bus_numbers: tuple[int, ...] = field(default=())

    def __post_init__(self):
        # normalise sequences so equality and hashing behave
        for name in ("buses", "branches", "generators", "loads", "bus_numbers"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if not self.bus_numbers:
            object.__setattr__(self, "bus_numbers", tuple(range(len(self.buses))))

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    def replace(self, **changes) -> "NetworkCase":
        return dataclasses.replace(self, **changes)

    # --- cached array views (the dataclass is immutable) -------------------

    @cached_property
    def slack(self) -> int:
        return next(b.id for b in self.buses if b.kind is BusKind.SLACK)

    @cached_property
    def pv(self) -> np.ndarray:
        return np.array([b.id for b in self.buses if b.kind is BusKind.PV], dtype=int)

    @cached_property
    def pq(self) -> np.ndarray:
        return np.array([b.id for b in self.buses if b.kind is BusKind.PQ], dtype=int)

    @cached_property
    def in_service(self) -> tuple[Branch, ...]:
        return tuple(br for br in self.branches if br.status)

    @cached_property
    def edges(self) -> np.ndarray:
        """(m, 2) array of in-service branch endpoints."""
        if not self.in_service:
            return np.zeros((0, 2), dtype=int)
        return np.array([(br.from_bus, br.to_bus) for br in self.in_service], dtype=int)

    def v_setpoints(self) -> np.ndarray:
        """Voltage magnitude setpoints; 1.0 at PQ buses."""
        vset = np.ones(self.n_bus)
        seen = set()
        for gen in self.generators:
            if gen.status and gen.bus not in seen and self.buses[gen.bus].kind is not BusKind.PQ:
                vset[gen.bus] = gen.v_set
                seen.add(gen.bus)
        return vset

    def load_injection(self) -> np.ndarray:
        """Complex power drawn by loads at each bus."""
        s = np.zeros(self.n_bus, dtype=complex)
        for ld in self.loads:
            s[ld.bus] += ld.p + 1j * ld.q
        return s

    def gen_injection(self) -> np.ndarray:
        """Scheduled complex generation; reactive part only counts at PQ buses."""
        s = np.zeros(self.n_bus, dtype=complex)
        for gen in self.generators:
            if not gen.status:
                continue
            s[gen.bus] += gen.p_set
            if self.buses[gen.bus].kind is BusKind.PQ:
                s[gen.bus] += 1j * gen.q_set
        return s

    def scheduled_injection(self) -> np.ndarray:
        return self.gen_injection() - self.load_injection()

    def zero_injection_buses(self) -> np.ndarray:
        """Boolean mask of buses carrying neither an in-service generator nor a load."""
        mask = np.ones(self.n_bus, dtype=bool)
        for gen in self.generators:
            if gen.status:
                mask[gen.bus] = False
        for ld in self.loads:
            if ld.p != 0.0 or ld.q != 0.0:
                mask[ld.bus] = False
        return mask


# --------------------------------------------------------------------------
# validation


def is_connected(n_bus: int, edges) -> bool:
    if n_bus == 0:
        return True
    adj = [[] for _ in range(n_bus)]
    for s, t in edges:
        adj[s].append(t)
        adj[t].append(s)
    seen = np.zeros(n_bus, dtype=bool)
    seen[0] = True
    queue = deque([0])
    while queue:
        u = queue.popleft()
        for w in adj[u]:
            if not seen[w]:
                seen[w] = True
                queue.append(w)
    return bool(seen.all())


def validate(case: NetworkCase) -> NetworkCase:
    """Check referential integrity and physical sanity; returns the case unchanged."""
    n = case.n_bus
    if n == 0:
        raise CaseError("case has no buses")
    for i, bus in enumerate(case.buses):
        if bus.id != i:
            raise CaseError(f"buses[{i}].id must equal its position, got {bus.id}")
        if not np.isfinite(bus.shunt_b) or not np.isfinite(bus.shunt_g):
            raise CaseError(f"buses[{i}] has a non-finite shunt")
    n_slack = sum(b.kind is BusKind.SLACK for b in case.buses)
    if n_slack != 1:
        raise CaseError(f"case must have exactly one slack bus, found {n_slack}")
    for k, br in enumerate(case.branches):
        for end in (br.from_bus, br.to_bus):
            if not 0 <= end < n:
                raise CaseError(f"branches[{k}] references unknown bus {end}")
        if br.from_bus == br.to_bus:
            raise CaseError(f"branches[{k}] is a self loop at bus {br.from_bus}")
        if br.g < 0:
            raise CaseError(f"branches[{k}].g must be >= 0, got {br.g}")
        if not br.tap > 0:
            raise CaseError(f"branches[{k}].tap must be > 0, got {br.tap}")
        if not all(np.isfinite([br.g, br.b, br.b_sh, br.tap])):
            raise CaseError(f"branches[{k}] has non-finite parameters")
    for k, gen in enumerate(case.generators):
        if not 0 <= gen.bus < n:
            raise CaseError(f"generators[{k}] references unknown bus {gen.bus}")
        if gen.participation < 0:
            raise CaseError(f"generators[{k}].participation must be >= 0")
    for k, ld in enumerate(case.loads):
        if not 0 <= ld.bus < n:
            raise CaseError(f"loads[{k}] references unknown bus {ld.bus}")
        if not (np.isfinite(ld.p) and np.isfinite(ld.q)):
            raise CaseError(f"loads[{k}] is not finite")
    if not is_connected(n, case.edges):
        raise CaseError("in-service network is not connected")
    return case


# --------------------------------------------------------------------------
# admittance matrix


def branch_admittances(case: NetworkCase):
    """Per in-service branch (y_ff, y_ft, y_tf, y_tt) pi-model entries.

    Off-nominal taps use the standard transformation with the tap on the
    from side; without phase shift y_ft == y_tf so Ybus stays symmetric.
    """
    br = case.in_service
    ys = np.array([b.g + 1j * b.b for b in br], dtype=complex)
    bc = np.array([b.b_sh for b in br])
    tap = np.array([b.tap for b in br])
    ytt = ys + 0.5j * bc
    yff = ytt / tap**2
    yft = -ys / tap
    return yff, yft, yft, ytt


def build_ybus(case: NetworkCase) -> sp.csr_matrix:
    n = case.n_bus
    e = case.edges
    yff, yft, ytf, ytt = branch_admittances(case)
    f, t = e[:, 0], e[:, 1]
    rows = np.concatenate([f, f, t, t, np.arange(n)])
    cols = np.concatenate([f, t, f, t, np.arange(n)])
    shunt = np.array([b.shunt_g + 1j * b.shunt_b for b in case.buses])
    vals = np.concatenate([yff, yft, ytf, ytt, shunt])
    ybus = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    ybus.sum_duplicates()
    return ybus


# --------------------------------------------------------------------------
# MATPOWER reader

_BUS_TYPES = {1: BusKind.PQ, 2: BusKind.PV, 3: BusKind.SLACK}


def _matrix_block(text: str, name: str, min_cols: int) -> list[list[float]]:
    m = re.search(rf"mpc\.{name}\s*=\s*\[", text)
    if m is None:
        raise CaseError(f"missing mpc.{name}")
    end = text.find("]", m.end())
    if end < 0:
        raise CaseError(f"unterminated mpc.{name} matrix")
    first_line = text.count("\n", 0, m.end()) + 1
    rows = []
    body = text[m.end():end]
    for offset, raw in enumerate(body.split("\n")):
        line = raw.split("%", 1)[0]
        for chunk in line.split(";"):
            chunk = chunk.strip()
            if not chunk:
                continue
            try:
                vals = [float(tok) for tok in chunk.replace(",", " ").split()]
            except ValueError as exc:
                raise CaseError(f"line {first_line + offset}: bad number in mpc.{name}: {exc}") from None
            if len(vals) < min_cols:
                raise CaseError(
                    f"line {first_line + offset}: mpc.{name} row has {len(vals)} columns, need {min_cols}"
                )
            rows.append(vals)
    return rows


def parse_matpower_case(text: str) -> NetworkCase:
    """Read the bus/gen/branch subset of a MATPOWER version-2 case file."""
    m = re.search(r"mpc\.baseMVA\s*=\s*([0-9.eE+-]+)", text)
    if m is None:
        raise CaseError("missing mpc.baseMVA")
    base = float(m.group(1))
    bus_rows = _matrix_block(text, "bus", 13)
    gen_rows = _matrix_block(text, "gen", 10)
    branch_rows = _matrix_block(text, "branch", 11)

    numbers = [int(r[0]) for r in bus_rows]
    index = {num: i for i, num in enumerate(numbers)}
    if len(index) != len(numbers):
        raise CaseError("duplicate bus numbers in mpc.bus")

    def lookup(num, what):
        try:
            return index[int(num)]
        except KeyError:
            raise CaseError(f"{what} references unknown bus {int(num)}") from None

    gens = []
    gen_buses = set()
    for r in gen_rows:
        status = r[7] > 0
        bus = lookup(r[0], "mpc.gen")
        gens.append(Generator(bus=bus, p_set=r[1] / base, q_set=r[2] / base, v_set=r[5],
                              p_max=r[8] / base, status=status))
        if status:
            gen_buses.add(bus)

    buses, loads = [], []
    for i, r in enumerate(bus_rows):
        code = int(r[1])
        if code not in _BUS_TYPES:
            raise CaseError(f"bus {numbers[i]} has unsupported type {code}")
        kind = _BUS_TYPES[code]
        if kind is BusKind.PV and i not in gen_buses:
            kind = BusKind.PQ
        buses.append(Bus(id=i, kind=kind, shunt_g=r[4] / base, shunt_b=r[5] / base, base_kv=r[9]))
        if r[2] != 0.0 or r[3] != 0.0:
            loads.append(Load(bus=i, p=r[2] / base, q=r[3] / base))
    if not any(b.kind is BusKind.SLACK for b in buses):
        raise CaseError("case has no slack bus")

    branches = []
    for r in branch_rows:
        if r[9] != 0.0:
            raise CaseError(f"branch {int(r[0])}-{int(r[1])}: phase shifters are not supported")
        z = complex(r[2], r[3])
        y = 1.0 / z
        branches.append(Branch(from_bus=lookup(r[0], "mpc.branch"), to_bus=lookup(r[1], "mpc.branch"),
                               g=y.real, b=y.imag, b_sh=r[4], tap=r[8] if r[8] != 0.0 else 1.0,
                               status=r[10] > 0))

    case = NetworkCase(buses=tuple(buses), branches=tuple(branches),
                       generators=tuple(gens), loads=tuple(loads), mva_base=base,
                       bus_numbers=tuple(numbers))
    return validate(normalize_participation(case))


def normalize_participation(case: NetworkCase, weights=None) -> NetworkCase:
    """Set droop participation proportional to ``weights`` (default p_max).

    Factors are normalised over in-service, non-slack generators; the slack
    unit and out-of-service units get 0.
    """
    gens = case.generators
    if weights is None:
        weights = [g.p_max for g in gens]
    eligible = [g.status and case.buses[g.bus].kind is not BusKind.SLACK for g in gens]
    total = sum(w for w, ok in zip(weights, eligible) if ok)
    new = []
    for g, w, ok in zip(gens, weights, eligible):
        part = w / total if ok and total > 0 else 0.0
        new.append(dataclasses.replace(g, participation=part))
    return case.replace(generators=tuple(new))


def load_case(name_or_path: str) -> NetworkCase:
    """Load a bundled case (``"case14"``, ``"case30"``, ``"case118"``...) or a file path."""
    if name_or_path.endswith(".json"):
        with open(name_or_path) as fh:
            return parse_json_case(fh.read())
    if "/" in name_or_path or name_or_path.endswith(".m"):
        with open(name_or_path) as fh:
            return parse_matpower_case(fh.read())
    text = resources.files("gridwarm.data").joinpath(f"{name_or_path}.m").read_text()
    return parse_matpower_case(text)


# --------------------------------------------------------------------------
# JSON schema

_SCHEMA = {
    "bus": {"id": int, "kind": str, "shunt_b": float, "shunt_g": float, "base_kv": float},
    "branch": {"from_bus": int, "to_bus": int, "g": float, "b": float, "b_sh": float,
               "tap": float, "status": bool},
    "generator": {"bus": int, "p_set": float, "v_set": float, "p_max": float,
                  "participation": float, "q_set": float, "status": bool},
    "load": {"bus": int, "p": float, "q": float},
}


def case_to_dict(case: NetworkCase) -> dict:
    def rec(obj):
        d = dataclasses.asdict(obj)
        if "kind" in d:
            d["kind"] = d["kind"].value
        return d

    return {
        "format_version": FORMAT_VERSION,
        "mva_base": case.mva_base,
        "bus_numbers": list(case.bus_numbers),
        "buses": [rec(b) for b in case.buses],
        "branches": [rec(b) for b in case.branches],
        "generators": [rec(g) for g in case.generators],
        "loads": [rec(ld) for ld in case.loads],
    }


def _require(d, key, path):
    if not isinstance(d, dict) or key not in d:
        raise CaseError(f"missing field {path + key}")
    return d[key]


def _record(d, kind, path):
    out = {}
    for key, typ in _SCHEMA[kind].items():
        val = _require(d, key, path + ".")
        if typ is bool:
            if not isinstance(val, bool):
                raise CaseError(f"field {path}.{key} must be a boolean")
        elif typ is int:
            if isinstance(val, bool) or not isinstance(val, int):
                raise CaseError(f"field {path}.{key} must be an integer")
        elif typ is float:
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise CaseError(f"field {path}.{key} must be a number")
            val = float(val)
        elif not isinstance(val, typ):
            raise CaseError(f"field {path}.{key} has wrong type")
        out[key] = val
    return out


def case_from_dict(d: dict) -> NetworkCase:
    version = _require(d, "format_version", "")
    if version != FORMAT_VERSION:
        raise CaseError(f"unsupported format_version {version}")
    base = float(_require(d, "mva_base", ""))
    buses = []
    for i, b in enumerate(_require(d, "buses", "")):
        rec = _record(b, "bus", f"buses[{i}]")
        try:
            rec["kind"] = BusKind(rec["kind"])
        except ValueError:
            raise CaseError(f"field buses[{i}].kind must be one of Slack/PV/PQ") from None
        buses.append(Bus(**rec))
    branches = [Branch(**_record(b, "branch", f"branches[{i}]"))
                for i, b in enumerate(_require(d, "branches", ""))]
    gens = [Generator(**_record(g, "generator", f"generators[{i}]"))
            for i, g in enumerate(_require(d, "generators", ""))]
    loads = [Load(**_record(ld, "load", f"loads[{i}]"))
             for i, ld in enumerate(_require(d, "loads", ""))]
    numbers = tuple(int(x) for x in d.get("bus_numbers", range(len(buses))))
    case = NetworkCase(buses=tuple(buses), branches=tuple(branches), generators=tuple(gens),
                       loads=tuple(loads), mva_base=base, bus_numbers=numbers)
    return validate(case)


def serialize_json_case(case: NetworkCase) -> str:
    return json.dumps(case_to_dict(case))


def parse_json_case(text: str) -> NetworkCase:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseError(f"invalid JSON: {exc}") from None
    return case_from_dict(d)
