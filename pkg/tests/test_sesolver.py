import time
import warnings

import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import exact_measurements, perturbed, random_network
from ecfse.errors import BatchError, NoReferenceError
from ecfse.measmodel import MeasurementSet, NoiseSpec, PmuMeasurement, RtuMeasurement, assign_devices, \
    generate_measurements
from ecfse.netmodel import Branch, Bus, Network
from ecfse.sesolver import KCL_TOL, assemble, estimate, reduced_kkt, solve, solve_batch


def dense_oracle(p):
    """Solve the full (u, lambda) KKT system with a dense generic solver."""
    k, rhs = p.dense_kkt()
    z = np.linalg.solve(k, rhs)
    return z[:p.n_unknowns], z[p.n_unknowns:]


def noisy_instance(seed, n_bus=None):
    rng = np.random.default_rng(seed)
    n = n_bus or int(rng.integers(3, 11))
    net = random_network(rng, n)
    k = int(rng.integers(1, n))
    pmus = set(int(b) for b in rng.choice(np.arange(1, n + 1), k, replace=False))
    return net, perturbed(exact_measurements(net, pmus), rng)


def two_bus():
    net = Network(100.0, [Bus(1), Bus(2, v_true_mag=0.97, v_true_angle=-0.08)], [Branch(1, 2, 0.01, 0.1, 0.02)])
    return net, exact_measurements(net, {1})


# ---------------------------------------------------------------- assembly

def test_two_bus_dimensions():
    net, m = two_bus()
    p = assemble(net, m)
    assert p.constraint_matrix.shape == (4, 6)


def test_all_pmu_has_no_free_currents():
    net, _ = two_bus()
    p = assemble(net, exact_measurements(net, {1, 2}))
    assert p.n_rtu == 0 and p.constraint_matrix.shape == (4, 4)
    assert np.all(p.objective_weights > 0)


def test_ieee118_dimensions_and_nnz_budget(case118, noise_118):
    a = assign_devices(case118, noise_118, np.random.default_rng(0))
    m = generate_measurements(case118, case118.true_state(), a, noise_118, np.random.default_rng(1))
    p = assemble(case118, m)
    assert p.constraint_matrix.shape == (236, 236 + 2 * m.n_rtu)
    pairs = {frozenset((b.from_bus, b.to_bus)) for b in case118.branches if b.in_service}
    # each complex Ybus entry is a full 2x2 real block; device stamps hit existing diagonal blocks
    expected = 4 * (case118.n_bus + 2 * len(pairs)) + 2 * m.n_rtu
    assert p.constraint_matrix.nnz == expected


# ---------------------------------------------------------------- solve

def test_two_bus_perfect_recovery():
    net, m = two_bus()
    res = estimate(net, m)
    np.testing.assert_allclose(res.x_hat.complex, net.true_state().complex, atol=1e-10)
    assert res.objective_value < 1e-20


def test_rtu_only_raises_no_reference():
    net, _ = two_bus()
    m = exact_measurements(net, set())
    with pytest.raises(NoReferenceError, match="no PMU"):
        estimate(net, m)


def test_island_without_pmu_raises_no_reference():
    net = Network(100.0, [Bus(1), Bus(2), Bus(3), Bus(4)], [Branch(1, 2, 0.0, 0.1), Branch(3, 4, 0.0, 0.1)])
    with pytest.raises(NoReferenceError, match="island"):
        estimate(net, exact_measurements(net, {1}))
    assert estimate(net, exact_measurements(net, {1, 3})).objective_value < 1e-20


@pytest.mark.parametrize("seed", range(5))
def test_random_five_bus_matches_dense_kkt(seed):
    net, m = noisy_instance(seed, n_bus=5)
    p = assemble(net, m)
    res = solve(p)
    u, lam = dense_oracle(p)
    assert np.linalg.norm(res.u - u) <= 1e-8 * np.linalg.norm(u)
    assert np.linalg.norm(res.multipliers - lam) <= 1e-8 * max(np.linalg.norm(lam), 1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_kkt_consistency_and_objective(seed):
    net, m = noisy_instance(seed)
    p = assemble(net, m)
    res = solve(p)
    assert np.max(np.abs(p.constraint_matrix @ res.u - p.rhs)) < KCL_TOL
    assert res.kcl_residual_norm < KCL_TOL
    recomputed = 0.5 * (np.sum(res.pmu_residual_currents ** 2) + np.sum(res.rtu_residual_currents ** 2))
    assert res.objective_value == pytest.approx(recomputed, rel=1e-10, abs=1e-300)


@pytest.mark.parametrize("seed", range(3))
def test_projected_perturbation_never_improves(seed):
    net, m = noisy_instance(100 + seed)
    p = assemble(net, m)
    res = solve(p)
    f0 = p.objective(res.u)
    tangent = sla.null_space(p.constraint_matrix.toarray())
    for j in range(tangent.shape[1]):
        for h in (1e-4, -1e-4):
            assert p.objective(res.u + h * tangent[:, j]) >= f0 - 1e-10


@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_finite_differences(seed):
    net, m = noisy_instance(200 + seed)
    p = assemble(net, m)
    rng = np.random.default_rng(seed)
    u = rng.standard_normal(p.n_unknowns)
    g = p.gradient(u)
    fd = np.empty_like(u)
    h = 1e-6
    for k in range(len(u)):
        e = np.zeros_like(u)
        e[k] = h
        fd[k] = (p.objective(u + e) - p.objective(u - e)) / (2 * h)
    np.testing.assert_allclose(fd, g, rtol=1e-6, atol=1e-6 * np.max(np.abs(g)))


def test_gpmu_weight_monotonicity():
    net, m = noisy_instance(7, n_bus=6)
    k = 0
    prev = np.inf
    for g in (1.0, 3.0, 10.0, 30.0, 100.0):
        mm = MeasurementSet.from_json(m.to_json())
        mm.pmu_g = mm.pmu_g.copy()
        mm.pmu_g[k] = g
        res = estimate(net, mm)
        kb = net.bus_index[int(mm.pmu_bus[k])]
        dev = abs(res.x_hat.complex[kb] - mm.pmu_v[k])
        assert dev <= prev * (1 + 1e-9)
        prev = dev


@settings(max_examples=20, deadline=None)
@given(st.integers(3, 9), st.integers(0, 2**31), st.floats(0.1, 3.0))
def test_rotation_degeneracy_without_pmu(n, seed, theta):
    rng = np.random.default_rng(seed)
    net = random_network(rng, n)
    m = exact_measurements(net, set())
    p = assemble(net, m)
    # true voltages with zero slack currents are feasible; so is any global rotation of them
    v = net.true_state().complex
    u = np.concatenate([np.column_stack([v.real, v.imag]).ravel(), np.zeros(2 * p.n_rtu)])
    assert np.max(np.abs(p.constraint_matrix @ u - p.rhs)) < 1e-9
    vr = v * np.exp(1j * theta)
    u_rot = np.concatenate([np.column_stack([vr.real, vr.imag]).ravel(), np.zeros(2 * p.n_rtu)])
    assert np.max(np.abs(p.constraint_matrix @ u_rot - p.rhs)) < 1e-9
    assert p.objective(u_rot) == pytest.approx(p.objective(u), abs=1e-15)
    with pytest.raises(NoReferenceError):
        solve(p)


@settings(max_examples=20, deadline=None)
@given(st.integers(3, 9), st.integers(0, 2**31))
def test_any_single_pmu_gives_unique_solution(n, seed):
    rng = np.random.default_rng(seed)
    net = random_network(rng, n)
    bus = int(rng.integers(1, n + 1))
    p = assemble(net, exact_measurements(net, {bus}))
    k, _ = reduced_kkt(p)
    assert np.linalg.matrix_rank(k.toarray()) == k.shape[0]
    res = solve(p)
    np.testing.assert_allclose(res.x_hat.complex, net.true_state().complex, atol=1e-8)


def test_unmeasured_loaded_bus_warns():
    net = Network(100.0, [Bus(1), Bus(2, v_true_mag=0.95, v_true_angle=-0.1), Bus(3)],
                  [Branch(1, 2, 0.0, 0.1), Branch(2, 3, 0.0, 0.1)])
    m = exact_measurements(net, {1})
    keep = m.rtu_bus != 2
    m2 = MeasurementSet(pmu_bus=m.pmu_bus, pmu_v=m.pmu_v, pmu_i=m.pmu_i, pmu_g=m.pmu_g, pmu_perfect=m.pmu_perfect,
                        pmu_sigma_v=m.pmu_sigma_v, pmu_sigma_i=m.pmu_sigma_i, rtu_bus=m.rtu_bus[keep],
                        rtu_vmag=m.rtu_vmag[keep], rtu_p=m.rtu_p[keep], rtu_q=m.rtu_q[keep],
                        rtu_weight=m.rtu_weight[keep], rtu_sigma=m.rtu_sigma[keep], reference_bus=1)
    with pytest.warns(UserWarning, match="zero-injection"):
        assemble(net, m2)


def test_zero_injection_unmeasured_bus_is_silent():
    net = Network(100.0, [Bus(1), Bus(2), Bus(3)], [Branch(1, 2, 0.0, 0.1), Branch(2, 3, 0.0, 0.1)])
    m = exact_measurements(net, {1})
    m2 = MeasurementSet.from_devices(m.pmus, [r for r in m.rtus if r.bus != 2], 1)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        res = estimate(net, m2)
    np.testing.assert_allclose(res.x_hat.complex, 1.0, atol=1e-10)


# ---------------------------------------------------------------- batches

def test_batch_of_one_matches_solve():
    net, m = noisy_instance(3)
    a = solve_batch(net, [m])[0]
    b = estimate(net, m)
    np.testing.assert_array_equal(a.u, b.u)


def test_batch_zero_noise_results_identical():
    net, _ = noisy_instance(4)
    m = exact_measurements(net, {1, 2})
    res = solve_batch(net, [m] * 4)
    for r in res[1:]:
        np.testing.assert_array_equal(r.u, res[0].u)


def test_batch_equals_one_by_one_bitwise():
    net, base = noisy_instance(5, n_bus=8)
    rng = np.random.default_rng(9)
    msets = [perturbed(base, rng) for _ in range(6)]
    # two sets that differ only in PMU readings share the matrix, exercising factor reuse
    same_matrix = MeasurementSet.from_json(msets[0].to_json())
    same_matrix.pmu_v = same_matrix.pmu_v * 1.001
    msets.insert(1, same_matrix)
    for b, m in zip(solve_batch(net, msets), msets):
        np.testing.assert_array_equal(b.u, estimate(net, m).u)


def test_batch_placement_mismatch():
    net, _ = noisy_instance(6, n_bus=5)
    with pytest.raises(BatchError):
        solve_batch(net, [exact_measurements(net, {1}), exact_measurements(net, {2})])


def test_rte_single_solve_under_one_second(case1888):
    a = assign_devices(case1888, NoiseSpec(), np.random.default_rng(0))
    m = generate_measurements(case1888, case1888.true_state(), a, NoiseSpec(), np.random.default_rng(1))
    estimate(case1888, m)  # warm-up
    t0 = time.perf_counter()
    res = estimate(case1888, m)
    assert time.perf_counter() - t0 < 1.0
    assert res.kcl_residual_norm < KCL_TOL * 100


def test_device_order_does_not_matter():
    net, m = noisy_instance(8, n_bus=7)
    rev = MeasurementSet.from_devices(list(reversed(m.pmus)), list(reversed(m.rtus)), m.reference_bus)
    np.testing.assert_allclose(estimate(net, rev).x_hat.complex, estimate(net, m).x_hat.complex, atol=1e-12)


def test_pmu_current_channel_sign():
    """The PMU current is the injection into the network: exact data must give a zero residual."""
    net, _ = two_bus()
    v = net.true_state().complex
    from ecfse.netmodel import build_ybus

    i = build_ybus(net).complex_matrix @ v
    m = MeasurementSet.from_devices([PmuMeasurement(1, v[0].real, v[0].imag, i[0].real, i[0].imag),
                                     PmuMeasurement(2, v[1].real, v[1].imag, i[1].real, i[1].imag)], [], 1)
    assert estimate(net, m).objective_value < 1e-25
    flipped = MeasurementSet.from_devices([PmuMeasurement(1, v[0].real, v[0].imag, -i[0].real, -i[0].imag)],
                                          [RtuMeasurement(2, abs(v[1]), 0.0, 0.0)], 1)
    assert estimate(net, flipped).objective_value > 1e-6
