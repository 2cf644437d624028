"""Per-unit network model: MATPOWER case parsing, bus admittance matrix, flows.

Voltages and currents use cartesian coordinates. The real form of the
admittance matrix interleaves the real and imaginary part of every bus, so
bus ``i`` owns rows/columns ``2*i`` and ``2*i + 1``.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import ModelError, ParseError, QueryError, ValidationError

# MATPOWER column indices
BUS_I, BUS_TYPE, PD, QD, GS, BS, BUS_AREA, VM, VA, BASE_KV = range(10)
GEN_BUS, PG, QG = 0, 1, 2
GEN_STATUS = 7
F_BUS, T_BUS, BR_R, BR_X, BR_B = 0, 1, 2, 3, 4
TAP, SHIFT, BR_STATUS = 8, 9, 10

_MIN_COLS = {"bus": 13, "gen": 10, "branch": 11}


@dataclass(frozen=True)
class Bus:
    id: int
    shunt_conductance: float = 0.0
    shunt_susceptance: float = 0.0
    v_true_mag: float = 1.0
    v_true_angle: float = 0.0
    bus_type: int = 1
    pd: float = 0.0
    qd: float = 0.0
    base_kv: float = 0.0


@dataclass(frozen=True)
class Generator:
    bus: int
    pg: float = 0.0
    qg: float = 0.0
    in_service: bool = True


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r_series: float
    x_series: float
    charging_susceptance: float = 0.0
    tap_ratio: float = 1.0
    phase_shift: float = 0.0
    in_service: bool = True
    is_transformer: bool = False


@dataclass(frozen=True)
class Network:
    base_mva: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...] = ()
    bus_index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "generators", tuple(self.generators))
        index = {}
        for k, bus in enumerate(self.buses):
            if bus.id in index:
                raise ValidationError(f"duplicate bus id {bus.id}")
            index[bus.id] = k
        object.__setattr__(self, "bus_index", index)
        for k, br in enumerate(self.branches):
            for end in (br.from_bus, br.to_bus):
                if end not in index:
                    raise ValidationError(f"branch {k} references unknown bus {end}")
            if not br.tap_ratio > 0:
                raise ValidationError(f"branch {k} has non-positive tap ratio {br.tap_ratio}")
        for g in self.generators:
            if g.bus not in index:
                raise ValidationError(f"generator references unknown bus {g.bus}")

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @cached_property
    def arrays(self) -> "BranchArrays":
        return BranchArrays.from_network(self)

    def bus_ids(self) -> np.ndarray:
        return np.array([b.id for b in self.buses], dtype=np.int64)

    def true_state(self) -> "VoltageState":
        mag = np.array([b.v_true_mag for b in self.buses])
        ang = np.array([b.v_true_angle for b in self.buses])
        return VoltageState.from_polar(mag, ang)

    def find_branch(self, from_bus: int, to_bus: int) -> int:
        """Position of the first in-service branch joining two buses (either direction)."""
        for k, br in enumerate(self.branches):
            if br.in_service and {br.from_bus, br.to_bus} == {from_bus, to_bus}:
                return k
        raise QueryError(f"no in-service branch between buses {from_bus} and {to_bus}")


@dataclass(frozen=True, eq=False)
class BranchArrays:
    """Column view of in-service branches used by the vectorized builders."""

    positions: np.ndarray  # index into Network.branches
    f: np.ndarray  # dense bus index
    t: np.ndarray
    r: np.ndarray
    x: np.ndarray
    b: np.ndarray
    tap: np.ndarray  # complex tap t*exp(j*shift)
    is_transformer: np.ndarray
    shunt: np.ndarray  # complex per-unit bus shunt, length n_bus

    @classmethod
    def from_network(cls, net: Network) -> "BranchArrays":
        live = [k for k, br in enumerate(net.branches) if br.in_service]
        brs = [net.branches[k] for k in live]
        idx = net.bus_index
        return cls(
            positions=np.array(live, dtype=np.int64),
            f=np.array([idx[br.from_bus] for br in brs], dtype=np.int64),
            t=np.array([idx[br.to_bus] for br in brs], dtype=np.int64),
            r=np.array([br.r_series for br in brs], dtype=float),
            x=np.array([br.x_series for br in brs], dtype=float),
            b=np.array([br.charging_susceptance for br in brs], dtype=float),
            tap=np.array([br.tap_ratio * np.exp(1j * br.phase_shift) for br in brs], dtype=complex),
            is_transformer=np.array([br.is_transformer for br in brs], dtype=bool),
            shunt=np.array(
                [complex(b.shunt_conductance, b.shunt_susceptance) for b in net.buses], dtype=complex
            ),
        )


@dataclass(eq=False)
class VoltageState:
    vreal: np.ndarray
    vimag: np.ndarray

    def __post_init__(self):
        self.vreal = np.asarray(self.vreal, dtype=float)
        self.vimag = np.asarray(self.vimag, dtype=float)
        if self.vreal.shape != self.vimag.shape:
            raise ValidationError("vreal and vimag differ in length")
        if not (np.all(np.isfinite(self.vreal)) and np.all(np.isfinite(self.vimag))):
            raise ValidationError("voltage state has non-finite entries")

    @classmethod
    def from_complex(cls, v) -> "VoltageState":
        v = np.asarray(v, dtype=complex)
        return cls(v.real.copy(), v.imag.copy())

    @classmethod
    def from_polar(cls, mag, angle) -> "VoltageState":
        return cls.from_complex(np.asarray(mag) * np.exp(1j * np.asarray(angle)))

    @classmethod
    def from_interleaved(cls, u) -> "VoltageState":
        u = np.asarray(u, dtype=float)
        return cls(u[0::2].copy(), u[1::2].copy())

    @property
    def complex(self) -> np.ndarray:
        return self.vreal + 1j * self.vimag

    @property
    def interleaved(self) -> np.ndarray:
        out = np.empty(2 * len(self.vreal))
        out[0::2] = self.vreal
        out[1::2] = self.vimag
        return out

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.complex)

    @property
    def angle(self) -> np.ndarray:
        return np.angle(self.complex)

    def __len__(self):
        return len(self.vreal)


@dataclass(frozen=True, eq=False)
class AdmittanceMatrix:
    """Bus admittance matrix in complex (N x N) and interleaved real (2N x 2N) form."""

    complex_matrix: sp.csr_matrix

    @property
    def dimension(self) -> int:
        return 2 * self.complex_matrix.shape[0]

    @cached_property
    def matrix(self) -> sp.csr_matrix:
        return complex_to_real(self.complex_matrix)


def complex_to_real(y) -> sp.csr_matrix:
    """Expand a complex sparse matrix into the interleaved real 2x2 block form.

    Each complex entry g + jb becomes [[g, -b], [b, g]], which is KCL written
    separately for real and imaginary currents.
    """
    coo = sp.coo_matrix(y)
    rows, cols, vals = complex_stamp_entries(coo.row, coo.col, coo.data)
    n = 2 * y.shape[0]
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, 2 * y.shape[1]))


def complex_stamp_entries(rows, cols, vals):
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    vals = np.asarray(vals, dtype=complex)
    g, b = vals.real, vals.imag
    r2 = np.concatenate([2 * rows, 2 * rows, 2 * rows + 1, 2 * rows + 1])
    c2 = np.concatenate([2 * cols, 2 * cols + 1, 2 * cols, 2 * cols + 1])
    v2 = np.concatenate([g, -b, b, g])
    return r2, c2, v2


def branch_admittances(arrays: BranchArrays, r=None, x=None):
    """Pi-equivalent two-port admittances (yff, yft, ytf, ytt) of in-service branches.

    Taps sit on the from side with the series impedance on the to side, as in
    MATPOWER.
    """
    r = arrays.r if r is None else np.asarray(r, dtype=float)
    x = arrays.x if x is None else np.asarray(x, dtype=float)
    z2 = r * r + x * x
    if np.any(z2 <= 0):
        k = int(arrays.positions[np.argmax(z2 <= 0)])
        raise ModelError(f"branch {k} has zero series impedance")
    ys = (r - 1j * x) / z2
    ytt = ys + 0.5j * arrays.b
    yff = ytt / (arrays.tap * np.conj(arrays.tap))
    yft = -ys / np.conj(arrays.tap)
    ytf = -ys / arrays.tap
    return yff, yft, ytf, ytt


def ybus_entries(net: Network, r=None, x=None):
    """COO triplets of the complex Ybus (duplicates not summed)."""
    a = net.arrays
    yff, yft, ytf, ytt = branch_admittances(a, r, x)
    n = net.n_bus
    diag = np.arange(n)
    rows = np.concatenate([a.f, a.f, a.t, a.t, diag])
    cols = np.concatenate([a.f, a.t, a.f, a.t, diag])
    vals = np.concatenate([yff, yft, ytf, ytt, a.shunt])
    return rows, cols, vals


def build_ybus(net: Network, r=None, x=None) -> AdmittanceMatrix:
    """Assemble Ybus from in-service branches and bus shunts.

    ``r`` and ``x`` optionally override the series parameters of the
    in-service branches (same order as ``net.arrays``).
    """
    rows, cols, vals = ybus_entries(net, r, x)
    n = net.n_bus
    y = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    return AdmittanceMatrix(y)


@dataclass(frozen=True, eq=False)
class Injections:
    current: np.ndarray  # complex, into the network
    power: np.ndarray  # complex, S = V conj(I)


def true_injections(net: Network, x_true: VoltageState, ybus: AdmittanceMatrix | None = None) -> Injections:
    ybus = ybus or build_ybus(net)
    v = x_true.complex
    i = ybus.complex_matrix @ v
    return Injections(current=i, power=v * np.conj(i))


def branch_flows(net: Network, x: VoltageState, r=None, xs=None):
    """Complex power at both ends of every in-service branch (order of ``net.arrays``)."""
    a = net.arrays
    yff, yft, ytf, ytt = branch_admittances(a, r, xs)
    v = x.complex
    vf, vt = v[a.f], v[a.t]
    s_from = vf * np.conj(yff * vf + yft * vt)
    s_to = vt * np.conj(ytf * vf + ytt * vt)
    return s_from, s_to


def branch_flow(net: Network, x: VoltageState, branch_id: int):
    """(S_from, S_to) of the branch at position ``branch_id`` in ``net.branches``."""
    if not 0 <= branch_id < len(net.branches):
        raise QueryError(f"branch {branch_id} does not exist")
    br = net.branches[branch_id]
    if not br.in_service:
        raise QueryError(f"branch {branch_id} is out of service")
    pos = int(np.searchsorted(net.arrays.positions, branch_id))
    s_from, s_to = branch_flows(net, x)
    return complex(s_from[pos]), complex(s_to[pos])


def generation_minus_load(net: Network) -> np.ndarray:
    """Scheduled complex injection per bus from the gen and bus tables (per unit)."""
    s = np.array([-complex(b.pd, b.qd) for b in net.buses])
    for g in net.generators:
        if g.in_service:
            s[net.bus_index[g.bus]] += complex(g.pg, g.qg)
    return s


def zero_injection_buses(net: Network) -> list[int]:
    """Bus ids with no load, no shunt and no in-service generator, in bus order."""
    has_gen = {g.bus for g in net.generators if g.in_service}
    return [
        b.id
        for b in net.buses
        if b.pd == 0 and b.qd == 0 and b.shunt_conductance == 0 and b.shunt_susceptance == 0
        and b.id not in has_gen
    ]


def connected_components(net: Network) -> np.ndarray:
    """Component label per dense bus index over in-service branches."""
    from scipy.sparse.csgraph import connected_components as cc

    a = net.arrays
    n = net.n_bus
    adj = sp.coo_matrix((np.ones(len(a.f)), (a.f, a.t)), shape=(n, n))
    return cc(adj, directed=False)[1]


# ---------------------------------------------------------------- parsing

_ASSIGN = re.compile(r"^\s*mpc\.(\w+)\s*=\s*(.*)$")


def parse_case(text: str) -> Network:
    """Parse MATPOWER case text (or the JSON-lines mirror) into a per-unit Network."""
    if text.lstrip().startswith("{"):
        return network_from_json_lines(text)
    base_mva, tables = _read_matpower_tables(text)
    for name in ("bus", "branch"):
        if name not in tables:
            raise ParseError(f"missing mpc.{name} table")
    if base_mva is None:
        raise ParseError("missing mpc.baseMVA")
    return _network_from_tables(base_mva, tables)


def _read_matpower_tables(text):
    base_mva = None
    tables: dict[str, list[tuple[int, list[float]]]] = {}
    lines = text.splitlines()
    k = 0
    while k < len(lines):
        raw = lines[k].split("%", 1)[0]
        m = _ASSIGN.match(raw)
        k += 1
        if not m:
            continue
        name, rhs = m.group(1), m.group(2).strip()
        if name == "baseMVA":
            try:
                base_mva = float(rhs.rstrip(";").strip())
            except ValueError:
                raise ParseError(f"bad baseMVA value {rhs!r}", k) from None
            continue
        if not rhs.startswith("["):
            continue
        rows: list[tuple[int, list[float]]] = []
        body = rhs[1:]
        lineno = k
        while True:
            closed = "]" in body
            chunk = body.split("]", 1)[0]
            for piece in chunk.split(";"):
                piece = piece.strip().replace(",", " ")
                if not piece:
                    continue
                try:
                    rows.append((lineno, [float(tok) for tok in piece.split()]))
                except ValueError:
                    raise ParseError(f"malformed row in mpc.{name}: {piece!r}", lineno) from None
            if closed:
                break
            if k >= len(lines):
                raise ParseError(f"unterminated table mpc.{name}", lineno)
            body = lines[k].split("%", 1)[0]
            k += 1
            lineno = k
        if name in _MIN_COLS:
            need = _MIN_COLS[name]
            width = len(rows[0][1]) if rows else need
            for ln, row in rows:
                if len(row) < need or len(row) != width:
                    raise ParseError(
                        f"mpc.{name} row has {len(row)} columns (expected {max(need, width)})", ln
                    )
        tables[name] = rows
    return base_mva, tables


def _network_from_tables(base_mva, tables) -> Network:
    kv = {}
    buses = []
    for _, r in tables["bus"]:
        bid = int(r[BUS_I])
        kv[bid] = r[BASE_KV]
        buses.append(
            Bus(
                id=bid,
                bus_type=int(r[BUS_TYPE]),
                pd=r[PD] / base_mva,
                qd=r[QD] / base_mva,
                shunt_conductance=r[GS] / base_mva,
                shunt_susceptance=r[BS] / base_mva,
                v_true_mag=r[VM],
                v_true_angle=math.radians(r[VA]),
                base_kv=r[BASE_KV],
            )
        )
    gens = [
        Generator(bus=int(r[GEN_BUS]), pg=r[PG] / base_mva, qg=r[QG] / base_mva,
                  in_service=r[GEN_STATUS] > 0)
        for _, r in tables.get("gen", [])
    ]
    branches = []
    for ln, r in tables["branch"]:
        tap = r[TAP] if r[TAP] != 0 else 1.0
        shift = math.radians(r[SHIFT])
        f, t = int(r[F_BUS]), int(r[T_BUS])
        kv_differs = kv.get(f, 0) > 0 and kv.get(t, 0) > 0 and kv.get(f) != kv.get(t)
        branches.append(
            Branch(
                from_bus=f,
                to_bus=t,
                r_series=r[BR_R],
                x_series=r[BR_X],
                charging_susceptance=r[BR_B],
                tap_ratio=tap,
                phase_shift=shift,
                in_service=r[BR_STATUS] > 0,
                is_transformer=bool(tap != 1.0 or shift != 0.0 or kv_differs),
            )
        )
    return Network(base_mva=base_mva, buses=buses, branches=branches, generators=gens)


BUNDLED_CASES = ("case9", "case14", "case118", "case_ACTIVSg500", "case1888rte")


def load_case(path_or_name) -> Network:
    """Load a case from a file path, or one of the bundled MATPOWER cases by name."""
    p = Path(path_or_name)
    if p.exists():
        return parse_case(p.read_text())
    name = p.stem if p.suffix == ".m" else str(path_or_name)
    if name in BUNDLED_CASES:
        return parse_case(case_text(name))
    raise FileNotFoundError(f"case {path_or_name!r} not found")


def case_text(path_or_name) -> str:
    p = Path(path_or_name)
    if p.exists():
        return p.read_text()
    name = p.stem if p.suffix == ".m" else str(path_or_name)
    if name not in BUNDLED_CASES:
        raise FileNotFoundError(f"case {path_or_name!r} not found")
    return resources.files("ecfse").joinpath("data").joinpath(f"{name}.m").read_text()


# ---------------------------------------------------------------- serialization

def network_to_json_lines(net: Network) -> str:
    out = [json.dumps({"kind": "network", "base_mva": net.base_mva})]
    out += [json.dumps({"kind": "bus", **asdict(b)}) for b in net.buses]
    out += [json.dumps({"kind": "branch", **asdict(b)}) for b in net.branches]
    out += [json.dumps({"kind": "gen", **asdict(g)}) for g in net.generators]
    return "\n".join(out) + "\n"


def network_from_json_lines(text: str) -> Network:
    base = None
    buses, branches, gens = [], [], []
    kinds = {"bus": (Bus, buses), "branch": (Branch, branches), "gen": (Generator, gens)}
    for ln, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            kind = rec.pop("kind")
            if kind == "network":
                base = float(rec["base_mva"])
            else:
                cls, sink = kinds[kind]
                sink.append(cls(**rec))
        except (ValueError, KeyError, TypeError) as exc:
            raise ParseError(f"malformed record: {exc}", ln) from None
    if base is None:
        raise ParseError("missing network header record")
    return Network(base_mva=base, buses=buses, branches=branches, generators=gens)


def _preimage(target: float, forward, guess: float) -> float:
    """Float near ``guess`` that ``forward`` maps exactly onto ``target`` (for lossless round trips)."""
    for direction in (math.inf, -math.inf):
        v = guess
        for _ in range(8):
            if forward(v) == target:
                return v
            v = math.nextafter(v, direction)
    return guess


def dump_matpower(net: Network) -> str:
    """Serialize back to MATPOWER case text (values in MW/MVAr/degrees).

    Values are chosen so that :func:`parse_case` reproduces the network exactly.
    """
    base = net.base_mva

    def mw(v):
        return _preimage(v, lambda z: z / base, v * base)

    def deg(v):
        return _preimage(v, math.radians, math.degrees(v))
    lines = ["function mpc = ecfse_case", "mpc.version = '2';", f"mpc.baseMVA = {base!r};", "mpc.bus = ["]
    for b in net.buses:
        vals = [b.id, b.bus_type, mw(b.pd), mw(b.qd), mw(b.shunt_conductance),
                mw(b.shunt_susceptance), 1, b.v_true_mag, deg(b.v_true_angle),
                b.base_kv, 1, 1.1, 0.9]
        lines.append("\t" + "\t".join(repr(float(v)) if isinstance(v, float) else str(v) for v in vals) + ";")
    lines += ["];", "mpc.gen = ["]
    for g in net.generators:
        vals = [g.bus, mw(g.pg), mw(g.qg), 0.0, 0.0, 1.0, base, int(g.in_service), 0.0, 0.0]
        lines.append("\t" + "\t".join(repr(float(v)) if isinstance(v, float) else str(v) for v in vals) + ";")
    lines += ["];", "mpc.branch = ["]
    for br in net.branches:
        vals = [br.from_bus, br.to_bus, br.r_series, br.x_series, br.charging_susceptance, 0.0, 0.0, 0.0,
                br.tap_ratio, deg(br.phase_shift), int(br.in_service), -360.0, 360.0]
        lines.append("\t" + "\t".join(repr(float(v)) if isinstance(v, float) else str(v) for v in vals) + ";")
    lines.append("];")
    return "\n".join(lines) + "\n"


def ybus_to_csv(ybus: AdmittanceMatrix) -> str:
    """Coordinate triplets of the interleaved real matrix, header ``row,col,value``."""
    coo = ybus.matrix.tocoo()
    order = np.lexsort((coo.col, coo.row))
    rows = ["row,col,value"]
    rows += [f"{coo.row[k]},{coo.col[k]},{coo.data[k]!r}" for k in order]
    return "\n".join(rows) + "\n"
