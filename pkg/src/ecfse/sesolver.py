"""Linear state estimation as one sparse equality-constrained QP.

Unknowns ``u = (V, I_rtu)``: interleaved bus voltages followed by the (re, im)
slack current of every RTU. The objective is

    F = 1/2 sum_pmu G^2 |V_i - V_pmu|^2 + 1/2 sum_rtu w |I_rtu|^2

subject to the linear KCL rows ``A u = rhs``. Stationarity gives the KKT
system ``[H A^T; A 0] (u, lam) = (c, rhs)``. Because the RTU block of ``H``
is diagonal, ``I_rtu = -lam_rtu / w`` is eliminated exactly and the solver
factors the reduced symmetric indefinite system in ``(V, lam)``, ordered per
bus as ``(V_re, V_im, lam_re, lam_im)``.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import BatchError, NoReferenceError, SolverError
from .measmodel import MeasurementSet, stamp_measurements
from .netmodel import Network, VoltageState, complex_stamp_entries, connected_components, ybus_entries

log = logging.getLogger(__name__)

KCL_TOL = 1e-9


@dataclass(eq=False)
class SeProblem:
    n_bus: int
    n_rtu: int
    network_matrix: sp.csr_matrix  # 2N x 2N: Ybus plus device stamps
    rhs: np.ndarray
    rtu_pos: np.ndarray
    rtu_weight: np.ndarray
    pmu_pos: np.ndarray
    pmu_g: np.ndarray
    pmu_v: np.ndarray  # complex
    components: np.ndarray  # island label per bus
    damping: float = 0.0

    @property
    def n_unknowns(self) -> int:
        return 2 * self.n_bus + 2 * self.n_rtu

    @property
    def constraint_matrix(self) -> sp.csr_matrix:
        """A = [M  E], E coupling each RTU slack current into its bus KCL rows."""
        rows = np.empty(2 * self.n_rtu, dtype=np.int64)
        rows[0::2] = 2 * self.rtu_pos
        rows[1::2] = 2 * self.rtu_pos + 1
        e = sp.csr_matrix((np.ones(2 * self.n_rtu), (rows, np.arange(2 * self.n_rtu))),
                          shape=(2 * self.n_bus, 2 * self.n_rtu))
        return sp.hstack([self.network_matrix, e], format="csr")

    @property
    def objective_weights(self) -> np.ndarray:
        """Diagonal of H."""
        h = np.zeros(self.n_unknowns)
        g2 = self.pmu_g ** 2
        h[2 * self.pmu_pos] = g2
        h[2 * self.pmu_pos + 1] = g2
        h[2 * self.n_bus:] = np.repeat(self.rtu_weight, 2)
        return h

    @property
    def linear_term(self) -> np.ndarray:
        c = np.zeros(self.n_unknowns)
        g2 = self.pmu_g ** 2
        c[2 * self.pmu_pos] = g2 * self.pmu_v.real
        c[2 * self.pmu_pos + 1] = g2 * self.pmu_v.imag
        return c

    @property
    def objective_constant(self) -> float:
        return 0.5 * float(np.sum(self.pmu_g ** 2 * np.abs(self.pmu_v) ** 2))

    def objective(self, u) -> float:
        """F evaluated directly from residual currents."""
        u = np.asarray(u, dtype=float)
        v = u[0:2 * self.n_bus:2] + 1j * u[1:2 * self.n_bus:2]
        i_pmu = self.pmu_g * (v[self.pmu_pos] - self.pmu_v)
        i_rtu = u[2 * self.n_bus:]
        return 0.5 * float(np.sum(np.abs(i_pmu) ** 2)) + 0.5 * float(
            np.sum(np.repeat(self.rtu_weight, 2) * i_rtu ** 2))

    def gradient(self, u) -> np.ndarray:
        return self.objective_weights * np.asarray(u) - self.linear_term

    def dense_kkt(self):
        """Full (u, lam) KKT matrix and right-hand side as dense arrays."""
        a = self.constraint_matrix.toarray()
        h = np.diag(self.objective_weights)
        m = a.shape[0]
        k = np.block([[h, a.T], [a, np.zeros((m, m))]])
        return k, np.concatenate([self.linear_term, self.rhs])


@dataclass(eq=False)
class SeResult:
    x_hat: VoltageState
    rtu_residual_currents: np.ndarray  # (n_rtu, 2)
    pmu_residual_currents: np.ndarray  # (n_pmu, 2)
    objective_value: float
    kcl_residual_norm: float
    multipliers: np.ndarray
    u: np.ndarray
    rtu_bus: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    pmu_bus: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def r_z(self) -> float:
        """Sum of squared residual currents (twice the objective)."""
        return 2.0 * self.objective_value


def assemble(net: Network, mset: MeasurementSet, r=None, x=None, damping: float = 0.0) -> SeProblem:
    """Network constraints plus device stamps. ``r``/``x`` override in-service branch impedances."""
    stamps = stamp_measurements(net, mset)
    yr, yc, yv = ybus_entries(net, r, x)
    rr, rc, rv = complex_stamp_entries(yr, yc, yv)
    n2 = 2 * net.n_bus
    m = sp.csr_matrix(
        (np.concatenate([rv, stamps.vals]), (np.concatenate([rr, stamps.rows]), np.concatenate([rc, stamps.cols]))),
        shape=(n2, n2),
    )
    measured = np.zeros(net.n_bus, dtype=bool)
    measured[stamps.rtu_pos] = True
    measured[stamps.pmu_pos] = True
    if not measured.all():
        # an unmeasured bus acts as an exact zero-injection constraint
        v = net.true_state().complex
        inj = np.abs(sp.csr_matrix((yv, (yr, yc)), shape=(net.n_bus, net.n_bus)) @ v)
        loaded = np.flatnonzero(~measured & (inj > 1e-6))
        if loaded.size:
            ids = [net.buses[k].id for k in loaded[:5]]
            warnings.warn(f"{loaded.size} unmeasured bus(es) with nonzero stored injection treated as "
                          f"zero-injection, e.g. {ids}", stacklevel=2)
    return SeProblem(
        n_bus=net.n_bus,
        n_rtu=mset.n_rtu,
        network_matrix=m,
        rhs=stamps.rhs,
        rtu_pos=stamps.rtu_pos,
        rtu_weight=mset.rtu_weight.copy(),
        pmu_pos=stamps.pmu_pos,
        pmu_g=mset.pmu_g.copy(),
        pmu_v=mset.pmu_v.copy(),
        components=connected_components(net),
        damping=damping,
    )


def _vpos(a):
    return 4 * (a // 2) + a % 2


def _lpos(a):
    return _vpos(a) + 2


def check_reference(p: SeProblem):
    if len(p.pmu_pos) == 0:
        raise NoReferenceError("no PMU in measurement set: the estimate is only defined up to a "
                               "complex scaling of all voltages (no angle reference)")
    islands = np.unique(p.components)
    covered = np.unique(p.components[p.pmu_pos])
    missing = np.setdiff1d(islands, covered)
    if missing.size:
        raise NoReferenceError(f"{missing.size} of {islands.size} network island(s) carry no PMU "
                               "(structural islanding)")


def reduced_kkt(p: SeProblem):
    """Interleaved reduced KKT matrix (CSC) and right-hand side."""
    n2 = 2 * p.n_bus
    m = p.network_matrix.tocoo()
    pm = np.concatenate([2 * p.pmu_pos, 2 * p.pmu_pos + 1])
    g2 = np.concatenate([p.pmu_g ** 2, p.pmu_g ** 2])
    rt = np.concatenate([2 * p.rtu_pos, 2 * p.rtu_pos + 1])
    winv = np.concatenate([1.0 / p.rtu_weight, 1.0 / p.rtu_weight])
    parts_r = [_vpos(pm), _lpos(m.row), _vpos(m.col), _lpos(rt)]
    parts_c = [_vpos(pm), _vpos(m.col), _lpos(m.row), _lpos(rt)]
    parts_v = [g2, m.data, m.data, -winv]
    if p.damping:
        diag = np.arange(n2)
        parts_r += [_vpos(diag), _lpos(diag)]
        parts_c += [_vpos(diag), _lpos(diag)]
        parts_v += [np.full(n2, p.damping), np.full(n2, -p.damping)]
    k = sp.csc_matrix(
        (np.concatenate(parts_v), (np.concatenate(parts_r), np.concatenate(parts_c))), shape=(2 * n2, 2 * n2)
    )
    rhs = np.zeros(2 * n2)
    c = p.linear_term[:n2]
    rhs[_vpos(np.arange(n2))] = c
    rhs[_lpos(np.arange(n2))] = p.rhs
    return k, rhs


class Factorization:
    """Sparse LU of a reduced KKT matrix with a structure-only fill-reducing ordering."""

    def __init__(self, k: sp.csc_matrix):
        self.shape = k.shape
        try:
            self.lu = splu(k, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.1,
                           options=dict(SymmetricMode=True))
        except RuntimeError as exc:
            diag = np.abs(k.diagonal())
            raise SolverError(
                f"KKT factorization failed ({exc}); dimension {k.shape[0]}, nnz {k.nnz}, "
                f"{int(np.sum(diag == 0))} structurally zero diagonal pivots"
            ) from None
        udiag = np.abs(self.lu.U.diagonal())
        self.pivot_ratio = float(udiag.min() / udiag.max()) if udiag.size else 1.0

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return self.lu.solve(rhs)


def _finish(p: SeProblem, z: np.ndarray, rtu_bus, pmu_bus) -> SeResult:
    n2 = 2 * p.n_bus
    idx = np.arange(n2)
    v = z[_vpos(idx)]
    lam = z[_lpos(idx)]
    if not (np.all(np.isfinite(v)) and np.all(np.isfinite(lam))):
        raise SolverError("KKT solve produced non-finite values")
    i_rtu = np.empty(2 * p.n_rtu)
    i_rtu[0::2] = -lam[2 * p.rtu_pos] / p.rtu_weight
    i_rtu[1::2] = -lam[2 * p.rtu_pos + 1] / p.rtu_weight
    u = np.concatenate([v, i_rtu])
    kcl = p.network_matrix @ v - p.rhs
    kcl[2 * p.rtu_pos] += i_rtu[0::2]
    kcl[2 * p.rtu_pos + 1] += i_rtu[1::2]
    kcl_norm = float(np.max(np.abs(kcl))) if kcl.size else 0.0
    vc = v[0::2] + 1j * v[1::2]
    i_pmu = p.pmu_g * (vc[p.pmu_pos] - p.pmu_v)
    return SeResult(
        x_hat=VoltageState(v[0::2].copy(), v[1::2].copy()),
        rtu_residual_currents=i_rtu.reshape(-1, 2),
        pmu_residual_currents=np.column_stack([i_pmu.real, i_pmu.imag]) if len(i_pmu) else np.zeros((0, 2)),
        objective_value=p.objective(u),
        kcl_residual_norm=kcl_norm,
        multipliers=lam,
        u=u,
        rtu_bus=np.asarray(rtu_bus, dtype=np.int64),
        pmu_bus=np.asarray(pmu_bus, dtype=np.int64),
    )


def solve(p: SeProblem, rtu_bus=(), pmu_bus=()) -> SeResult:
    """Direct (non-iterative) solve of the estimation QP."""
    check_reference(p)
    k, rhs = reduced_kkt(p)
    fac = Factorization(k)
    res = _finish(p, fac.solve(rhs), rtu_bus, pmu_bus)
    if res.kcl_residual_norm > KCL_TOL * max(1.0, float(np.max(np.abs(p.rhs), initial=0.0))):
        log.warning("KCL residual %.3e above tolerance (pivot ratio %.2e)", res.kcl_residual_norm,
                    fac.pivot_ratio)
    return res


def estimate(net: Network, mset: MeasurementSet, r=None, x=None) -> SeResult:
    """Assemble and solve in one call."""
    return solve(assemble(net, mset, r, x), mset.rtu_bus, mset.pmu_bus)


def solve_batch(net: Network, msets, r=None, x=None) -> list[SeResult]:
    """Solve many measurement sets that share one device placement.

    The factorization is reused whenever the matrix values repeat (only PMU
    readings changed); otherwise the matrix is refactored on the same pattern.
    """
    msets = list(msets)
    if not msets:
        return []
    placement = msets[0].placement()
    results = []
    last_key = None
    fac = None
    for m in msets:
        if m.placement() != placement:
            raise BatchError("measurement sets in a batch must share one device placement")
        p = assemble(net, m, r, x)
        check_reference(p)
        k, rhs = reduced_kkt(p)
        key = k.data.tobytes()
        if fac is None or key != last_key:
            fac = Factorization(k)
            last_key = key
        results.append(_finish(p, fac.solve(rhs), m.rtu_bus, m.pmu_bus))
    return results
