"""Performance measures, mergeable streaming summaries and percentile intervals."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from .errors import InsufficientDataError, ValidationError

DEFAULT_BINS = 200
DEFAULT_SAMPLE_CAP = 2_000_000


@dataclass(frozen=True)
class StateMetrics:
    x_sigma: float
    x_max: float
    r_z: float


def state_metrics(x_hat, x_true, r_z: float) -> StateMetrics:
    """Squared error over stacked re/im parts, worst complex deviation, residual sum."""
    a = x_hat.complex if hasattr(x_hat, "complex") else np.asarray(x_hat, dtype=complex)
    b = x_true.complex if hasattr(x_true, "complex") else np.asarray(x_true, dtype=complex)
    if a.shape != b.shape:
        raise ValidationError(f"state dimension mismatch: {a.shape} vs {b.shape}")
    d = a - b
    x_sigma = float(np.sum(d.real ** 2) + np.sum(d.imag ** 2))
    x_max = float(np.max(np.abs(d))) if d.size else 0.0
    return StateMetrics(x_sigma, x_max, float(r_z))


# ---------------------------------------------------------------- moments

@dataclass
class Moments:
    """Count, mean and sum of squared deviations, merged with Chan's formula."""

    count: int = 0
    mean: float = 0.0
    m2: float = 0.0
    min: float = math.inf
    max: float = -math.inf

    @classmethod
    def of(cls, values) -> "Moments":
        v = np.asarray(values, dtype=float).ravel()
        if v.size == 0:
            return cls()
        mu = float(np.mean(v))
        return cls(int(v.size), mu, float(np.sum((v - mu) ** 2)), float(v.min()), float(v.max()))

    def merge(self, other: "Moments") -> "Moments":
        if other.count == 0:
            return Moments(self.count, self.mean, self.m2, self.min, self.max)
        if self.count == 0:
            return Moments(other.count, other.mean, other.m2, other.min, other.max)
        n = self.count + other.count
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.count / n)
        m2 = self.m2 + other.m2 + delta * delta * (self.count * other.count / n)
        return Moments(n, mean, m2, min(self.min, other.min), max(self.max, other.max))

    def add(self, values) -> "Moments":
        return self.merge(Moments.of(values))

    @property
    def variance(self) -> float:
        """Unbiased sample variance."""
        return self.m2 / (self.count - 1) if self.count > 1 else 0.0

    @property
    def std(self) -> float:
        return math.sqrt(self.variance)


Z_99 = float(sps.norm.ppf(0.995))


def mean_ci(data, confidence: float = 0.99) -> tuple[float, float]:
    """Normal-approximation interval: (mean, z * s / sqrt(n))."""
    m = data if isinstance(data, Moments) else Moments.of(data)
    if m.count < 2:
        raise InsufficientDataError(f"need at least 2 samples for a mean interval, have {m.count}")
    z = float(sps.norm.ppf(0.5 + confidence / 2))
    return m.mean, z * m.std / math.sqrt(m.count)


# ---------------------------------------------------------------- histogram

@dataclass
class Histogram:
    """Fixed-edge histogram; ``counts`` has an underflow and an overflow slot."""

    edges: np.ndarray
    counts: np.ndarray = None

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=float)
        if self.counts is None:
            self.counts = np.zeros(len(self.edges) + 1, dtype=np.int64)

    @classmethod
    def uniform(cls, lo: float, hi: float, bins: int = DEFAULT_BINS) -> "Histogram":
        if not hi > lo:
            hi = lo + max(abs(lo), 1.0) * 1e-9
        return cls(np.linspace(lo, hi, bins + 1))

    def add(self, values):
        v = np.asarray(values, dtype=float).ravel()
        # slot 0: below edges[0]; slot len(edges): at or above edges[-1] (last bin closed)
        slot = np.searchsorted(self.edges, v, side="right")
        slot[v == self.edges[-1]] = len(self.edges) - 1
        self.counts += np.bincount(slot, minlength=len(self.counts)).astype(np.int64)
        return self

    def merge(self, other: "Histogram") -> "Histogram":
        if not np.array_equal(self.edges, other.edges):
            raise ValidationError("cannot merge histograms with different edges")
        return Histogram(self.edges.copy(), self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_csv(self) -> str:
        lines = ["bin_low,bin_high,count"]
        lines.append(f"-inf,{self.edges[0]!r},{self.counts[0]}")
        for k in range(len(self.edges) - 1):
            lines.append(f"{self.edges[k]!r},{self.edges[k + 1]!r},{self.counts[k + 1]}")
        lines.append(f"{self.edges[-1]!r},inf,{self.counts[-1]}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- percentiles

@dataclass(frozen=True)
class PercentileEstimate:
    p: float
    point: float
    ci_low: float
    ci_high: float
    confidence: float
    index: int  # 1-based order statistic of the point estimate
    low_index: int
    high_index: int


def order_statistic_indices(n: int, p: float, confidence: float) -> tuple[int, int]:
    """1-based (l, u) with P(X_(l) <= q_p <= X_(u)) >= confidence.

    l is the largest integer with BinomCDF(l-1; n, p) <= alpha/2 and u the
    smallest with BinomCDF(u-1; n, p) >= 1 - alpha/2.
    """
    alpha = 1.0 - confidence
    cdf = sps.binom.cdf(np.arange(n + 1), n, p)  # cdf[k] = P(B <= k)
    slack = 1e-12
    lo_ok = np.flatnonzero(cdf[: n] <= alpha / 2 * (1 + slack))  # candidates k = l - 1
    hi_ok = np.flatnonzero(cdf[: n + 1] >= (1 - alpha / 2) * (1 - slack))
    l = int(lo_ok[-1]) + 1 if lo_ok.size else 0
    u = int(hi_ok[0]) + 1 if hi_ok.size else n + 1
    return l, u


def minimum_samples(p: float, confidence: float, n_max: int = 10_000_000) -> int:
    """Smallest n with valid order-statistic bounds at (p, confidence)."""
    alpha = 1.0 - confidence
    # need (1-p)^n <= alpha/2 and p^n <= alpha/2
    need = 1
    for q in (p, 1 - p):
        if q <= 0:
            continue
        if q >= 1:
            return n_max + 1
        need = max(need, math.ceil(math.log(alpha / 2) / math.log(q)))
    n = max(need - 1, 1)
    while n <= n_max:
        l, u = order_statistic_indices(n, p, confidence)
        if l >= 1 and u <= n:
            return n
        n += 1
    return n_max + 1


def percentile_ci(sorted_samples, p: float, confidence: float = 0.99) -> PercentileEstimate:
    """Order-statistic point estimate and distribution-free interval for the p-quantile."""
    x = np.asarray(sorted_samples, dtype=float)
    n = len(x)
    if not 0 < p < 1:
        raise ValidationError("p must lie strictly between 0 and 1")
    l, u = order_statistic_indices(n, p, confidence) if n else (0, 1)
    if n == 0 or l < 1 or u > n:
        raise InsufficientDataError(
            f"{n} samples cannot bound the {p} quantile at {confidence} confidence; "
            f"minimum is {minimum_samples(p, confidence)}"
        )
    k = min(max(math.ceil(p * n), 1), n)
    return PercentileEstimate(p, float(x[k - 1]), float(x[l - 1]), float(x[u - 1]), confidence, k, l, u)


def analytic_coverage(n: int, p: float, l: int, u: int) -> float:
    """P(X_(l) <= q_p <= X_(u)) for continuous data = P(l <= B <= u - 1)."""
    return float(sps.binom.cdf(u - 1, n, p) - sps.binom.cdf(l - 1, n, p))


@dataclass(frozen=True)
class TailEstimate:
    threshold: float
    fraction: float
    ci_low: float
    ci_high: float
    exceed: int
    count: int
    confidence: float


def tail_probability(samples, threshold: float, confidence: float = 0.99) -> TailEstimate:
    """Fraction of samples strictly above ``threshold`` with a Clopper-Pearson interval."""
    x = np.asarray(samples, dtype=float)
    n = x.size
    if n < 1:
        raise InsufficientDataError("tail probability needs at least one sample")
    k = int(np.count_nonzero(x > threshold))
    a = 1.0 - confidence
    lo = 0.0 if k == 0 else float(sps.beta.ppf(a / 2, k, n - k + 1))
    hi = 1.0 if k == n else float(sps.beta.ppf(1 - a / 2, k + 1, n - k))
    return TailEstimate(float(threshold), k / n, lo, hi, k, n, confidence)


# ---------------------------------------------------------------- summaries

@dataclass
class QuantitySummary:
    """Mergeable per-quantity summary: moments, histogram and retained samples."""

    name: str
    moments: Moments = field(default_factory=Moments)
    histogram: Histogram | None = None
    samples: list = field(default_factory=list)
    sample_cap: int = DEFAULT_SAMPLE_CAP
    retained: int = 0

    def add(self, values):
        v = np.asarray(values, dtype=float).ravel()
        self.moments = self.moments.add(v)
        if self.histogram is not None:
            self.histogram.add(v)
        room = self.sample_cap - self.retained
        if room > 0:
            keep = v[:room].copy()
            self.samples.append(keep)
            self.retained += keep.size
        return self

    def merge(self, other: "QuantitySummary") -> "QuantitySummary":
        out = QuantitySummary(self.name, self.moments.merge(other.moments), sample_cap=self.sample_cap)
        if self.histogram is not None or other.histogram is not None:
            if self.histogram is None or other.histogram is None:
                raise ValidationError("cannot merge a summary with a histogram into one without")
            out.histogram = self.histogram.merge(other.histogram)
        for chunk in self.samples + other.samples:
            room = out.sample_cap - out.retained
            if room <= 0:
                break
            keep = chunk[:room]
            out.samples.append(keep)
            out.retained += keep.size
        return out

    def set_edges(self, edges):
        """Fix histogram edges and bin every retained sample."""
        self.histogram = Histogram(np.asarray(edges, dtype=float))
        for chunk in self.samples:
            self.histogram.add(chunk)

    @property
    def count(self) -> int:
        return self.moments.count

    def values(self) -> np.ndarray:
        return np.concatenate(self.samples) if self.samples else np.zeros(0)

    def sorted_values(self) -> np.ndarray:
        if self.retained < self.count:
            raise InsufficientDataError(
                f"{self.name}: only {self.retained} of {self.count} samples retained; raise the sample cap")
        return np.sort(self.values())

    def percentile(self, p: float, confidence: float = 0.99) -> PercentileEstimate:
        return percentile_ci(self.sorted_values(), p, confidence)


def pilot_edges(values, bins: int = DEFAULT_BINS, width: float = 6.0) -> np.ndarray:
    """Uniform edges over mean +/- width*std of a pilot sample."""
    m = Moments.of(values)
    half = width * m.std
    if half == 0:
        half = max(abs(m.mean), 1.0) * 1e-9
    return np.linspace(m.mean - half, m.mean + half, bins + 1)


def stopping_check(summaries, rule: str = "all", rel_tol: float = 0.05, confidence: float = 0.99) -> bool:
    """True when the mean interval of any/all summaries is within rel_tol of its mean."""
    if rule == "none":
        return False
    if rule not in ("any", "all"):
        raise ValidationError(f"unknown stopping rule {rule!r}")
    ok = []
    for s in summaries:
        m = s.moments if isinstance(s, QuantitySummary) else s
        if m.count < 2:
            ok.append(False)
            continue
        mean, half = mean_ci(m, confidence)
        ok.append(half == 0 or half <= rel_tol * abs(mean))
    return any(ok) if rule == "any" else bool(ok) and all(ok)


@dataclass(frozen=True)
class PairedVarianceTest:
    ratio: float  # std(a) / std(b)
    statistic: float
    p_value: float  # one-sided, H1: var(a) > var(b)


def paired_variance_test(a, b) -> PairedVarianceTest:
    """Pitman-Morgan test for equal variances of paired samples.

    cov(a + b, a - b) = var(a) - var(b), so a positive correlation between the
    sum and the difference is evidence that ``a`` is more variable.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.size < 3:
        raise InsufficientDataError("paired variance test needs two equal-length samples of size >= 3")
    s, d = a + b, a - b
    if np.std(s) == 0 or np.std(d) == 0:
        r = 0.0
    else:
        r = float(np.corrcoef(s, d)[0, 1])
    n = a.size
    t = r * math.sqrt(n - 2) / math.sqrt(max(1.0 - r * r, 1e-300))
    sb = np.std(b, ddof=1)
    return PairedVarianceTest(float(np.std(a, ddof=1) / sb) if sb > 0 else math.inf, t, float(sps.t.sf(t, n - 2)))
