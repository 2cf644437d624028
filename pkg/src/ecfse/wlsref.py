"""Classical nonlinear WLS state estimator (polar Gauss-Newton) used as the baseline.

Measurements are bus power injections and voltage magnitudes in the usual
generator convention (positive P means power injected into the network).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import ObservabilityError, ValidationError
from .measmodel import MeasurementSet, NoiseSpec
from .netmodel import AdmittanceMatrix, Network, VoltageState, build_ybus

SIGMA_FLOOR = 1e-4  # p.u.; a floored sigma gives weight 1e8


@dataclass(eq=False)
class WlsProblem:
    """Measurement layout: z = [P at p_pos, Q at q_pos, |V| at v_pos]."""

    z: np.ndarray
    weights: np.ndarray
    p_pos: np.ndarray
    q_pos: np.ndarray
    v_pos: np.ndarray
    ref_pos: int
    ref_angle: float
    n_bus: int

    def __post_init__(self):
        if np.any(self.weights <= 0):
            raise ValidationError("WLS weights must be strictly positive")
        if len(self.z) != len(self.p_pos) + len(self.q_pos) + len(self.v_pos):
            raise ValidationError("measurement vector does not match layout")

    @property
    def free_angles(self) -> np.ndarray:
        return np.delete(np.arange(self.n_bus), self.ref_pos)

    def scaled(self, factor: float) -> "WlsProblem":
        return WlsProblem(self.z, self.weights * factor, self.p_pos, self.q_pos, self.v_pos,
                          self.ref_pos, self.ref_angle, self.n_bus)


@dataclass(eq=False)
class WlsResult:
    x_hat: VoltageState
    iterations: int
    converged: bool
    final_step_norm: float
    r_z_weighted: float
    r_z_unweighted: float

    @property
    def r_z(self) -> float:
        return self.r_z_unweighted


def _sigma(value, sigma, rel):
    s = np.where(np.isnan(sigma), rel * np.abs(value), sigma)
    return np.maximum(s, SIGMA_FLOOR)


def build_problem(net: Network, mset: MeasurementSet, noise: NoiseSpec | None = None,
                  sigma_floor: float = SIGMA_FLOOR) -> WlsProblem:
    """Translate a measurement set into injection/magnitude measurements.

    RTUs give P, Q and |V|. Each PMU contributes |V_pmu| and the power of its
    current channel; the reference PMU also fixes the angle. Buses without a
    device become exact zero-injection pseudo-measurements.
    """
    noise = noise or NoiseSpec()
    idx = net.bus_index
    rtu = np.array([idx[int(b)] for b in mset.rtu_bus], dtype=np.int64)
    pmu = np.array([idx[int(b)] for b in mset.pmu_bus], dtype=np.int64)
    if mset.reference_bus is not None:
        ref = idx[int(mset.reference_bus)]
    elif len(pmu):
        ref = int(pmu[0])
    else:
        raise ObservabilityError("no PMU available to fix the reference angle")
    ref_k = int(np.flatnonzero(pmu == ref)[0])
    free = np.setdiff1d(np.arange(net.n_bus), np.concatenate([rtu, pmu]))

    rel_pq, rel_v = noise.rtu_pq_rel_sigma, noise.rtu_vmag_rel_sigma
    p_r, q_r, v_r = -mset.rtu_p, mset.rtu_q, mset.rtu_vmag
    sp_r = _sigma(p_r, mset.rtu_sigma[:, 0], rel_pq)
    sq_r = _sigma(q_r, mset.rtu_sigma[:, 1], rel_pq)
    sv_r = _sigma(v_r, mset.rtu_sigma[:, 2], rel_v)

    s_p = mset.pmu_v * np.conj(mset.pmu_i)
    v_p = np.abs(mset.pmu_v)
    si = mset.pmu_sigma_i * v_p
    sp_p = np.maximum(si, sigma_floor)
    sv_p = np.maximum(mset.pmu_sigma_v, sigma_floor)

    zeros = np.zeros(len(free))
    sfree = np.full(len(free), sigma_floor)
    p_pos = np.concatenate([rtu, pmu, free])
    q_pos = p_pos
    v_pos = np.concatenate([rtu, pmu])
    z = np.concatenate([p_r, s_p.real, zeros, q_r, s_p.imag, zeros, v_r, v_p])
    sig = np.concatenate([sp_r, sp_p, sfree, sq_r, sp_p, sfree, sv_r, sv_p])
    sig = np.maximum(sig, sigma_floor)
    return WlsProblem(z=z, weights=1.0 / sig ** 2, p_pos=p_pos, q_pos=q_pos, v_pos=v_pos,
                      ref_pos=ref, ref_angle=float(np.angle(mset.pmu_v[ref_k])), n_bus=net.n_bus)


def h_eval(ybus: AdmittanceMatrix, prob: WlsProblem, angle, vmag):
    """Predicted measurements and sparse Jacobian w.r.t. (free angles, magnitudes)."""
    y = ybus.complex_matrix
    v = vmag * np.exp(1j * angle)
    ibus = y @ v
    s = v * np.conj(ibus)
    h = np.concatenate([s.real[prob.p_pos], s.imag[prob.q_pos], vmag[prob.v_pos]])

    dv = sp.diags(v)
    dvn = sp.diags(v / vmag)
    di = sp.diags(ibus)
    ds_dva = 1j * dv @ np.conj(di - y @ dv)
    ds_dvm = dv @ np.conj(y @ dvn) + np.conj(di) @ dvn
    ds_dva = sp.csr_matrix(ds_dva)[:, prob.free_angles]
    ds_dvm = sp.csr_matrix(ds_dvm)
    n = prob.n_bus
    vrows = sp.csr_matrix((np.ones(len(prob.v_pos)), (np.arange(len(prob.v_pos)), prob.v_pos)),
                          shape=(len(prob.v_pos), n))
    jac = sp.vstack([
        sp.hstack([ds_dva[prob.p_pos].real, ds_dvm[prob.p_pos].real]),
        sp.hstack([ds_dva[prob.q_pos].imag, ds_dvm[prob.q_pos].imag]),
        sp.hstack([sp.csr_matrix((len(prob.v_pos), n - 1)), vrows]),
    ], format="csr")
    return h, jac


def _objective(prob, h):
    r = prob.z - h
    return float(r @ (prob.weights * r))


def wls_solve(net: Network, mset_or_problem, noise: NoiseSpec | None = None, tol: float = 1e-8,
              max_iter: int = 50, max_halvings: int = 10, ybus: AdmittanceMatrix | None = None) -> WlsResult:
    """Gauss-Newton from flat start with step halving.

    Non-convergence is reported through ``converged=False``; a singular gain
    matrix raises :class:`ObservabilityError`.
    """
    prob = (mset_or_problem if isinstance(mset_or_problem, WlsProblem)
            else build_problem(net, mset_or_problem, noise))
    ybus = ybus or build_ybus(net)
    n = prob.n_bus
    if len(prob.z) < 2 * n - 1:
        raise ObservabilityError(f"{len(prob.z)} measurements for {2 * n - 1} state variables")
    free = prob.free_angles
    angle = np.zeros(n)
    angle[prob.ref_pos] = prob.ref_angle
    angle[free] = prob.ref_angle
    vmag = np.ones(n)
    w = sp.diags(prob.weights)
    h, jac = h_eval(ybus, prob, angle, vmag)
    obj = _objective(prob, h)
    step_norm = np.inf
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        gain = (jac.T @ w @ jac).tocsc()
        rhs = jac.T @ (prob.weights * (prob.z - h))
        try:
            lu = splu(gain)
        except RuntimeError as exc:
            raise ObservabilityError(f"singular gain matrix ({exc})") from None
        ud = np.abs(lu.U.diagonal())
        if ud.min() <= 1e-13 * ud.max():
            raise ObservabilityError(f"gain matrix numerically singular (pivot ratio {ud.min() / ud.max():.1e})")
        dx = lu.solve(rhs)
        step_norm = float(np.max(np.abs(dx)))
        alpha = 1.0
        for _ in range(max_halvings + 1):
            a_new = angle.copy()
            a_new[free] += alpha * dx[: n - 1]
            v_new = vmag + alpha * dx[n - 1:]
            h_new, jac_new = h_eval(ybus, prob, a_new, v_new)
            obj_new = _objective(prob, h_new)
            if obj_new <= obj or step_norm < tol:
                break
            alpha *= 0.5
        else:
            # no decreasing step found along the Gauss-Newton direction
            break
        angle, vmag, h, jac, obj = a_new, v_new, h_new, jac_new, obj_new
        if step_norm < tol:
            converged = True
            break
    r = prob.z - h
    return WlsResult(
        x_hat=VoltageState.from_polar(vmag, angle),
        iterations=it,
        converged=converged,
        final_step_norm=step_norm,
        r_z_weighted=float(r @ (prob.weights * r)),
        r_z_unweighted=float(r @ r),
    )
