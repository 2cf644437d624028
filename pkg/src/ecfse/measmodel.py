"""PMU and RTU measurement models and the synthetic measurement generator.

Sign conventions (per bus ``i``, ``I_inj = (Y V)_i`` is the current the bus
injects into the network):

* a PMU current channel reports ``I_inj`` directly, so at the true state the
  PMU bus KCL reads ``(Y V)_i + G_pmu V_i = G_pmu V_pmu + I_pmu``;
* an RTU reports the power of the current its bus device *draws*,
  ``S_rtu = conj(V_i) * (-I_inj)``, so that ``Y_m = S_rtu / V_M**2`` is an
  admittance with ``Y_m V_i = -I_inj`` and the RTU slack current vanishes.
  In standard injection terms ``P_rtu = -P_inj`` and ``Q_rtu = Q_inj``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ConfigurationError, DegenerateMeasurementError, ParseError, ValidationError
from .netmodel import Network, VoltageState, true_injections, zero_injection_buses

SCHEMA = "ecfse.measurements/1"
DEFAULT_G_PMU = 10.0


@dataclass(frozen=True)
class PmuMeasurement:
    bus: int
    v_meas_real: float
    v_meas_imag: float
    i_meas_real: float
    i_meas_imag: float
    g_pmu: float = DEFAULT_G_PMU
    perfect: bool = False
    sigma_v: float = 0.0
    sigma_i: float = 0.0

    def __post_init__(self):
        if not self.g_pmu > 0:
            raise ValidationError(f"PMU at bus {self.bus}: g_pmu must be positive")


@dataclass(frozen=True)
class RtuMeasurement:
    bus: int
    v_mag: float
    p_inj: float
    q_inj: float
    weight: float = 1.0
    sigma_p: float | None = None
    sigma_q: float | None = None
    sigma_v: float | None = None

    def __post_init__(self):
        if not self.v_mag > 0:
            raise ValidationError(f"RTU at bus {self.bus}: v_mag must be positive")
        if not self.weight > 0:
            raise ValidationError(f"RTU at bus {self.bus}: weight must be positive")

    @classmethod
    def from_current(cls, bus: int, v_mag: float, i_mag: float, phi: float, **kw) -> "RtuMeasurement":
        """Build from current magnitude and the angle of the current relative to the voltage."""
        s = v_mag * i_mag
        return cls(bus=bus, v_mag=v_mag, p_inj=s * math.cos(phi), q_inj=s * math.sin(phi), **kw)


def rtu_admittance(m: RtuMeasurement, epsilon: float = 1e-6) -> complex:
    """Measurement admittance Y_m = (P + jQ) / V_M**2."""
    if m.v_mag <= epsilon:
        raise DegenerateMeasurementError(f"RTU at bus {m.bus}: |V|={m.v_mag} below {epsilon}")
    return complex(m.p_inj, m.q_inj) / (m.v_mag * m.v_mag)


@dataclass(frozen=True)
class NoiseSpec:
    """Relative measurement noise levels and PMU placement statistics.

    ``reference_bus`` forces one perfect PMU onto a bus: an explicit bus id,
    or ``"zero-injection"`` for the lowest-ordered zero-injection bus.
    """

    rtu_pq_rel_sigma: float = 0.01
    rtu_vmag_rel_sigma: float = 0.004
    pmu_rel_sigma: float = 0.0002
    pmu_perfect_fraction: float = 0.4
    pmu_bus_fraction: float = 0.1
    reference_bus: int | str | None = None
    g_pmu: float = DEFAULT_G_PMU
    vmag_epsilon: float = 1e-6

    def __post_init__(self):
        for name in ("rtu_pq_rel_sigma", "rtu_vmag_rel_sigma", "pmu_rel_sigma",
                     "pmu_perfect_fraction", "pmu_bus_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigurationError(f"{name}={v} outside [0, 1]")
        if not self.g_pmu > 0:
            raise ConfigurationError("g_pmu must be positive")
        if isinstance(self.reference_bus, str) and self.reference_bus != "zero-injection":
            raise ConfigurationError(f"unknown reference_bus policy {self.reference_bus!r}")

    @classmethod
    def single_reference(cls, **kw) -> "NoiseSpec":
        """RTUs everywhere plus one perfect PMU on a zero-injection bus."""
        kw.setdefault("pmu_bus_fraction", 0.0)
        kw.setdefault("reference_bus", "zero-injection")
        return cls(**kw)

    @classmethod
    def noiseless(cls, **kw) -> "NoiseSpec":
        return cls(rtu_pq_rel_sigma=0.0, rtu_vmag_rel_sigma=0.0, pmu_rel_sigma=0.0, **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown noise keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class DeviceAssignment:
    """Which bus carries which device. Buses absent from both tuples are unmeasured."""

    pmu_buses: tuple[int, ...]
    rtu_buses: tuple[int, ...]
    perfect_pmus: frozenset = field(default_factory=frozenset)
    reference_bus: int | None = None

    def __post_init__(self):
        if set(self.pmu_buses) & set(self.rtu_buses):
            raise ValidationError("a bus carries both a PMU and an RTU")
        if len(set(self.pmu_buses)) != len(self.pmu_buses) or len(set(self.rtu_buses)) != len(self.rtu_buses):
            raise ValidationError("duplicate device assignment")
        if self.reference_bus is not None and self.reference_bus not in self.pmu_buses:
            raise ValidationError("reference bus must carry a PMU")

    def kind(self, bus: int) -> str | None:
        if bus in self.pmu_buses:
            return "pmu"
        if bus in self.rtu_buses:
            return "rtu"
        return None


def _count(fraction: float, n: int) -> int:
    return int(math.floor(fraction * n + 1e-9))


def assign_devices(net: Network, spec: NoiseSpec, rng: np.random.Generator) -> DeviceAssignment:
    """Random PMU/RTU placement; a pure function of the generator state."""
    n = net.n_bus
    ids = [b.id for b in net.buses]
    ref = spec.reference_bus
    if ref == "zero-injection":
        zib = zero_injection_buses(net)
        if not zib:
            raise ConfigurationError("no zero-injection bus available for the reference PMU")
        ref = zib[0]
    if ref is not None and ref not in net.bus_index:
        raise ConfigurationError(f"reference bus {ref} not in network")
    n_pmu = _count(spec.pmu_bus_fraction, n)
    if n_pmu < 1 and ref is None:
        raise ConfigurationError("no PMU would be placed and no reference bus given")
    chosen = np.sort(rng.choice(n, size=n_pmu, replace=False)) if n_pmu else np.array([], dtype=int)
    n_perfect = _count(spec.pmu_perfect_fraction, n_pmu)
    perfect_idx = rng.choice(chosen, size=n_perfect, replace=False) if n_perfect else []
    pmu_idx = set(int(k) for k in chosen)
    perfect = {ids[int(k)] for k in perfect_idx}
    if ref is not None:
        pmu_idx.add(net.bus_index[ref])
        perfect.add(ref)
    pmus = tuple(ids[k] for k in sorted(pmu_idx))
    rtus = tuple(ids[k] for k in range(n) if k not in pmu_idx)
    if ref is None:
        ref = next((b for b in pmus if b in perfect), pmus[0])
    return DeviceAssignment(pmu_buses=pmus, rtu_buses=rtus, perfect_pmus=frozenset(perfect), reference_bus=ref)


class MeasurementSet:
    """Columnar store of one PMU/RTU measurement snapshot, ordered by bus position.

    The per-device dataclasses are available through :attr:`pmus` and
    :attr:`rtus`; the solver consumes the arrays directly.
    """

    def __init__(self, *, pmu_bus, pmu_v, pmu_i, pmu_g, pmu_perfect, pmu_sigma_v, pmu_sigma_i,
                 rtu_bus, rtu_vmag, rtu_p, rtu_q, rtu_weight, rtu_sigma,
                 reference_bus=None, resample_count=0):
        self.pmu_bus = np.asarray(pmu_bus, dtype=np.int64)
        self.pmu_v = np.asarray(pmu_v, dtype=complex)
        self.pmu_i = np.asarray(pmu_i, dtype=complex)
        self.pmu_g = np.asarray(pmu_g, dtype=float)
        self.pmu_perfect = np.asarray(pmu_perfect, dtype=bool)
        self.pmu_sigma_v = np.asarray(pmu_sigma_v, dtype=float)
        self.pmu_sigma_i = np.asarray(pmu_sigma_i, dtype=float)
        self.rtu_bus = np.asarray(rtu_bus, dtype=np.int64)
        self.rtu_vmag = np.asarray(rtu_vmag, dtype=float)
        self.rtu_p = np.asarray(rtu_p, dtype=float)
        self.rtu_q = np.asarray(rtu_q, dtype=float)
        self.rtu_weight = np.asarray(rtu_weight, dtype=float)
        # columns: sigma_p, sigma_q, sigma_v (nan = unknown)
        self.rtu_sigma = np.asarray(rtu_sigma, dtype=float).reshape(len(self.rtu_bus), 3)
        self.reference_bus = reference_bus
        self.resample_count = int(resample_count)
        self._validate()

    def _validate(self):
        all_bus = np.concatenate([self.pmu_bus, self.rtu_bus])
        if len(np.unique(all_bus)) != len(all_bus):
            raise ValidationError("a bus carries more than one device")
        if np.any(self.pmu_g <= 0):
            raise ValidationError("g_pmu must be positive")
        if np.any(self.rtu_vmag <= 0):
            raise ValidationError("RTU v_mag must be positive")
        if self.reference_bus is not None and self.reference_bus not in set(self.pmu_bus.tolist()):
            raise ValidationError("reference bus must carry a PMU")

    @classmethod
    def from_devices(cls, pmus=(), rtus=(), reference_bus=None, resample_count=0) -> "MeasurementSet":
        pmus, rtus = list(pmus), list(rtus)
        nan = float("nan")
        return cls(
            pmu_bus=[m.bus for m in pmus],
            pmu_v=[complex(m.v_meas_real, m.v_meas_imag) for m in pmus],
            pmu_i=[complex(m.i_meas_real, m.i_meas_imag) for m in pmus],
            pmu_g=[m.g_pmu for m in pmus],
            pmu_perfect=[m.perfect for m in pmus],
            pmu_sigma_v=[m.sigma_v for m in pmus],
            pmu_sigma_i=[m.sigma_i for m in pmus],
            rtu_bus=[m.bus for m in rtus],
            rtu_vmag=[m.v_mag for m in rtus],
            rtu_p=[m.p_inj for m in rtus],
            rtu_q=[m.q_inj for m in rtus],
            rtu_weight=[m.weight for m in rtus],
            rtu_sigma=[[nan if s is None else s for s in (m.sigma_p, m.sigma_q, m.sigma_v)] for m in rtus]
            or np.zeros((0, 3)),
            reference_bus=reference_bus,
            resample_count=resample_count,
        )

    @property
    def pmus(self) -> tuple[PmuMeasurement, ...]:
        return tuple(
            PmuMeasurement(int(b), v.real, v.imag, i.real, i.imag, float(g), bool(pf), float(sv), float(si))
            for b, v, i, g, pf, sv, si in zip(self.pmu_bus, self.pmu_v, self.pmu_i, self.pmu_g,
                                               self.pmu_perfect, self.pmu_sigma_v, self.pmu_sigma_i)
        )

    @property
    def rtus(self) -> tuple[RtuMeasurement, ...]:
        def opt(s):
            return None if math.isnan(s) else float(s)

        return tuple(
            RtuMeasurement(int(b), float(vm), float(p), float(q), float(w), opt(s[0]), opt(s[1]), opt(s[2]))
            for b, vm, p, q, w, s in zip(self.rtu_bus, self.rtu_vmag, self.rtu_p, self.rtu_q,
                                         self.rtu_weight, self.rtu_sigma)
        )

    @property
    def n_pmu(self) -> int:
        return len(self.pmu_bus)

    @property
    def n_rtu(self) -> int:
        return len(self.rtu_bus)

    def rtu_admittances(self, epsilon: float = 1e-6) -> np.ndarray:
        if np.any(self.rtu_vmag <= epsilon):
            k = int(np.argmax(self.rtu_vmag <= epsilon))
            raise DegenerateMeasurementError(f"RTU at bus {self.rtu_bus[k]}: |V| below {epsilon}")
        return (self.rtu_p + 1j * self.rtu_q) / (self.rtu_vmag * self.rtu_vmag)

    def placement(self) -> tuple:
        """Hashable device placement (which buses carry PMUs and RTUs)."""
        return (tuple(self.pmu_bus.tolist()), tuple(self.rtu_bus.tolist()))

    # ------------------------------------------------------------ JSON

    def to_json(self) -> str:
        devices = []
        for m in self.pmus:
            devices.append({"type": "pmu", "bus": m.bus, "v": [m.v_meas_real, m.v_meas_imag],
                            "i": [m.i_meas_real, m.i_meas_imag], "g_pmu": m.g_pmu, "perfect": m.perfect,
                            "sigma_v": m.sigma_v, "sigma_i": m.sigma_i})
        for m in self.rtus:
            devices.append({"type": "rtu", "bus": m.bus, "v_mag": m.v_mag, "p": m.p_inj, "q": m.q_inj,
                            "weight": m.weight, "sigma": [m.sigma_p, m.sigma_q, m.sigma_v]})
        doc = {"schema": SCHEMA, "reference_bus": self.reference_bus,
               "resample_count": self.resample_count, "devices": devices}
        return json.dumps(doc, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MeasurementSet":
        try:
            doc = json.loads(text)
            if doc.get("schema") != SCHEMA:
                raise ParseError(f"unsupported measurement schema {doc.get('schema')!r}")
            pmus, rtus = [], []
            for d in doc["devices"]:
                if d["type"] == "pmu":
                    pmus.append(PmuMeasurement(d["bus"], d["v"][0], d["v"][1], d["i"][0], d["i"][1],
                                               d.get("g_pmu", DEFAULT_G_PMU), d.get("perfect", False),
                                               d.get("sigma_v", 0.0), d.get("sigma_i", 0.0)))
                elif d["type"] == "rtu":
                    sig = d.get("sigma") or [None, None, None]
                    rtus.append(RtuMeasurement(d["bus"], d["v_mag"], d["p"], d["q"], d.get("weight", 1.0), *sig))
                else:
                    raise ParseError(f"unknown device type {d['type']!r}")
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise ParseError(f"malformed measurement file: {exc}") from None
        return cls.from_devices(pmus, rtus, doc.get("reference_bus"), doc.get("resample_count", 0))

    def sorted_by(self, net: Network) -> "MeasurementSet":
        """Copy with devices ordered by bus position in ``net``."""
        idx = net.bus_index
        po = np.argsort([idx[int(b)] for b in self.pmu_bus], kind="stable")
        ro = np.argsort([idx[int(b)] for b in self.rtu_bus], kind="stable")
        return MeasurementSet(
            pmu_bus=self.pmu_bus[po], pmu_v=self.pmu_v[po], pmu_i=self.pmu_i[po], pmu_g=self.pmu_g[po],
            pmu_perfect=self.pmu_perfect[po], pmu_sigma_v=self.pmu_sigma_v[po],
            pmu_sigma_i=self.pmu_sigma_i[po], rtu_bus=self.rtu_bus[ro], rtu_vmag=self.rtu_vmag[ro],
            rtu_p=self.rtu_p[ro], rtu_q=self.rtu_q[ro], rtu_weight=self.rtu_weight[ro],
            rtu_sigma=self.rtu_sigma[ro], reference_bus=self.reference_bus,
            resample_count=self.resample_count,
        )


@dataclass(frozen=True, eq=False)
class TruthProfile:
    """Noise-free quantities every synthetic measurement is drawn around."""

    v: np.ndarray  # complex bus voltages
    i_inj: np.ndarray  # complex network injections (Y V)

    @classmethod
    def compute(cls, net: Network, x_true: VoltageState, ybus=None) -> "TruthProfile":
        inj = true_injections(net, x_true, ybus)
        return cls(v=x_true.complex, i_inj=inj.current)


def generate_measurements(net: Network, x_true: VoltageState, assignment: DeviceAssignment,
                          spec: NoiseSpec, rng: np.random.Generator,
                          truth: TruthProfile | None = None) -> MeasurementSet:
    """Superimpose relative Gaussian errors on the true measured quantities.

    The stream is consumed in a fixed layout: an (n_rtu, 3) block of normals
    for (P, Q, |V|), an (n_pmu, 4) block for (V_re, V_im, I_re, I_im), then
    one normal per |V| that came out non-positive and has to be redrawn.
    """
    truth = truth or TruthProfile.compute(net, x_true)
    idx = net.bus_index
    rtu_pos = np.array([idx[b] for b in assignment.rtu_buses], dtype=np.int64)
    pmu_pos = np.array([idx[b] for b in assignment.pmu_buses], dtype=np.int64)

    v_r = truth.v[rtu_pos]
    s_rtu = -np.conj(v_r) * truth.i_inj[rtu_pos]
    p_true, q_true, vm_true = s_rtu.real, s_rtu.imag, np.abs(v_r)
    eps = rng.standard_normal((len(rtu_pos), 3))
    eps_pmu = rng.standard_normal((len(pmu_pos), 4))

    sp_ = spec.rtu_pq_rel_sigma
    sv_ = spec.rtu_vmag_rel_sigma
    p = p_true * (1.0 + sp_ * eps[:, 0])
    q = q_true * (1.0 + sp_ * eps[:, 1])
    vm = vm_true * (1.0 + sv_ * eps[:, 2])
    resampled = 0
    bad = np.flatnonzero(vm <= 0)
    while bad.size:
        resampled += bad.size
        vm[bad] = vm_true[bad] * (1.0 + sv_ * rng.standard_normal(bad.size))
        bad = bad[vm[bad] <= 0]
    sigma = np.column_stack([sp_ * np.abs(p_true), sp_ * np.abs(q_true), sv_ * vm_true])

    v_p = truth.v[pmu_pos]
    i_p = truth.i_inj[pmu_pos]
    perfect = np.array([b in assignment.perfect_pmus for b in assignment.pmu_buses], dtype=bool)
    sig_v = np.where(perfect, 0.0, spec.pmu_rel_sigma * np.abs(v_p))
    sig_i = np.where(perfect, 0.0, spec.pmu_rel_sigma * np.abs(i_p))
    pv = v_p + sig_v * (eps_pmu[:, 0] + 1j * eps_pmu[:, 1])
    pi = i_p + sig_i * (eps_pmu[:, 2] + 1j * eps_pmu[:, 3])
    # perfect devices copy the truth exactly (no 0*eps round-off)
    pv = np.where(perfect, v_p, pv)
    pi = np.where(perfect, i_p, pi)

    return MeasurementSet(
        pmu_bus=list(assignment.pmu_buses), pmu_v=pv, pmu_i=pi,
        pmu_g=np.full(len(pmu_pos), spec.g_pmu), pmu_perfect=perfect,
        pmu_sigma_v=sig_v, pmu_sigma_i=sig_i,
        rtu_bus=list(assignment.rtu_buses), rtu_vmag=vm, rtu_p=p, rtu_q=q,
        rtu_weight=np.ones(len(rtu_pos)), rtu_sigma=sigma,
        reference_bus=assignment.reference_bus, resample_count=resampled,
    )


@dataclass(frozen=True, eq=False)
class MeasurementStamps:
    """Matrix entries (interleaved 2N x 2N, COO, duplicates allowed) and source vector."""

    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray
    rhs: np.ndarray
    rtu_pos: np.ndarray  # dense bus position of each RTU
    pmu_pos: np.ndarray
    n_bus: int

    @property
    def matrix(self) -> sp.csr_matrix:
        n = 2 * self.n_bus
        return sp.csr_matrix((self.vals, (self.rows, self.cols)), shape=(n, n))


def stamp_measurements(net: Network, mset: MeasurementSet, epsilon: float = 1e-6) -> MeasurementStamps:
    """Circuit stamps of all devices.

    RTU: Y_m on the bus diagonal block; its slack current is a separate unknown
    handled by the solver. PMU: G_pmu on the diagonal and G_pmu*V_pmu + I_pmu
    on the right-hand side.
    """
    idx = net.bus_index
    try:
        rtu_pos = np.array([idx[int(b)] for b in mset.rtu_bus], dtype=np.int64)
        pmu_pos = np.array([idx[int(b)] for b in mset.pmu_bus], dtype=np.int64)
    except KeyError as exc:
        raise ValidationError(f"measurement on nonexistent bus {exc.args[0]}") from None
    ym = mset.rtu_admittances(epsilon)
    g, b = ym.real, ym.imag
    r0, r1 = 2 * rtu_pos, 2 * rtu_pos + 1
    q0, q1 = 2 * pmu_pos, 2 * pmu_pos + 1
    rows = np.concatenate([r0, r0, r1, r1, q0, q1])
    cols = np.concatenate([r0, r1, r0, r1, q0, q1])
    vals = np.concatenate([g, -b, b, g, mset.pmu_g, mset.pmu_g])
    rhs = np.zeros(2 * net.n_bus)
    src = mset.pmu_g * mset.pmu_v + mset.pmu_i
    rhs[q0] = src.real
    rhs[q1] = src.imag
    return MeasurementStamps(rows, cols, vals, rhs, rtu_pos, pmu_pos, net.n_bus)


__all__ = [
    "PmuMeasurement", "RtuMeasurement", "NoiseSpec", "DeviceAssignment", "MeasurementSet",
    "MeasurementStamps", "TruthProfile", "rtu_admittance", "assign_devices",
    "generate_measurements", "stamp_measurements",
]
