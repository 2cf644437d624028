import math
import sys
from fractions import Fraction

import numpy as np
import pytest

from ecfse.measmodel import DeviceAssignment, MeasurementSet, NoiseSpec, PmuMeasurement, RtuMeasurement
from ecfse.netmodel import Branch, Bus, Network, build_ybus, load_case


def random_network(rng, n_bus, extra_edges=2, with_taps=True, shunts=True):
    """Connected random network: a spanning tree plus a few extra branches."""
    mags = rng.uniform(0.95, 1.05, n_bus)
    angs = rng.uniform(-0.3, 0.3, n_bus)
    buses = [
        Bus(id=k + 1, shunt_conductance=rng.uniform(0, 0.02) if shunts else 0.0,
            shunt_susceptance=rng.uniform(-0.05, 0.05) if shunts else 0.0,
            v_true_mag=float(mags[k]), v_true_angle=float(angs[k]))
        for k in range(n_bus)
    ]
    edges = [(int(rng.integers(0, k)), k) for k in range(1, n_bus)]
    for _ in range(extra_edges):
        a, b = rng.choice(n_bus, 2, replace=False)
        edges.append((int(a), int(b)))
    branches = []
    for a, b in edges:
        tap = rng.uniform(0.95, 1.05) if with_taps and rng.random() < 0.3 else 1.0
        shift = rng.uniform(-0.1, 0.1) if with_taps and rng.random() < 0.15 else 0.0
        branches.append(Branch(a + 1, b + 1, r_series=rng.uniform(0.001, 0.05), x_series=rng.uniform(0.01, 0.3),
                               charging_susceptance=rng.uniform(0, 0.1), tap_ratio=tap, phase_shift=shift,
                               is_transformer=tap != 1.0 or shift != 0.0))
    return Network(100.0, buses, branches)


def exact_measurements(net, pmu_buses, g_pmu=10.0, reference_bus=None):
    """Noise-free measurement set: PMUs on ``pmu_buses``, RTUs elsewhere."""
    v = net.true_state().complex
    i_inj = build_ybus(net).complex_matrix @ v
    idx = net.bus_index
    pmus, rtus = [], []
    for b in net.bus_ids():
        k = idx[int(b)]
        if int(b) in pmu_buses:
            pmus.append(PmuMeasurement(int(b), v[k].real, v[k].imag, i_inj[k].real, i_inj[k].imag,
                                       g_pmu=g_pmu, perfect=True))
        else:
            s = np.conj(v[k]) * (-i_inj[k])
            rtus.append(RtuMeasurement(int(b), abs(v[k]), s.real, s.imag))
    ref = reference_bus if reference_bus is not None else (min(pmu_buses) if pmu_buses else None)
    return MeasurementSet.from_devices(pmus, rtus, reference_bus=ref)


def perturbed(mset, rng, scale=0.01):
    """Copy of ``mset`` with random relative noise on every value."""
    m = MeasurementSet.from_json(mset.to_json())
    m.pmu_v = m.pmu_v * (1 + scale * (rng.standard_normal(m.n_pmu) + 1j * rng.standard_normal(m.n_pmu)))
    m.pmu_i = m.pmu_i + scale * (rng.standard_normal(m.n_pmu) + 1j * rng.standard_normal(m.n_pmu))
    m.rtu_p = m.rtu_p * (1 + scale * rng.standard_normal(m.n_rtu))
    m.rtu_q = m.rtu_q * (1 + scale * rng.standard_normal(m.n_rtu))
    m.rtu_vmag = m.rtu_vmag * (1 + scale * rng.standard_normal(m.n_rtu))
    return m


@pytest.fixture(scope="session")
def case118():
    return load_case("case118")


@pytest.fixture(scope="session")
def case1888():
    return load_case("case1888rte")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def noise_118():
    return NoiseSpec.single_reference()


def assignment_for(net, pmu_buses, reference_bus=None):
    pmus = tuple(sorted(pmu_buses))
    return DeviceAssignment(pmu_buses=pmus, rtu_buses=tuple(int(b) for b in net.bus_ids() if b not in pmus),
                            perfect_pmus=frozenset(pmus), reference_bus=reference_bus or pmus[0])


def exact_indices(n, p, confidence):
    """Order-statistic bounds from an exact rational binomial CDF."""
    p = Fraction(p).limit_denominator(10**6)
    half = (1 - Fraction(confidence).limit_denominator(10**6)) / 2
    cdf, acc = [], Fraction(0)
    for k in range(n + 1):
        acc += math.comb(n, k) * p**k * (1 - p) ** (n - k)
        cdf.append(acc)
    lows = [k for k in range(n) if cdf[k] <= half]
    highs = [k for k in range(n + 1) if cdf[k] >= 1 - half]
    return (lows[-1] + 1 if lows else 0), (highs[0] + 1 if highs else n + 1)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for k in sorted(lines):
            terminalreporter.write_line(lines[k])
