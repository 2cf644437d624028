"""Reproducible parallel Monte Carlo campaigns over the linear estimator.

Every sample is a pure function of ``(seed, sample_index)``: its random
streams come from :func:`derive_stream`, so results do not depend on how
samples are distributed over workers. Samples are grouped into fixed-size
chunks; chunk results are merged strictly in chunk order and the stopping
rule is checked at chunk boundaries.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import multiprocessing as mp
import os
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (ConfigurationError, DegenerateMeasurementError, InsufficientDataError, NoReferenceError,
                     SolverError)
from .measmodel import (DeviceAssignment, MeasurementSet, NoiseSpec, TruthProfile, assign_devices,
                        generate_measurements)
from .netmodel import Network, VoltageState, branch_admittances, build_ybus, case_text, parse_case
from .sesolver import estimate
from .stats import (DEFAULT_BINS, DEFAULT_SAMPLE_CAP, QuantitySummary, mean_ci, percentile_ci, pilot_edges,
                    state_metrics, stopping_check, tail_probability)
from .wlsref import wls_solve

log = logging.getLogger(__name__)

METRICS = ("x_sigma", "x_max", "r_z")
SUMMARY_SCHEMA = "ecfse.mc-summary/1"


def derive_stream(seed: int, sample_index: int, tag: str) -> np.random.Generator:
    """Independent PCG64 stream keyed by (seed, sample index, purpose tag)."""
    key = (int(sample_index), zlib.crc32(tag.encode()))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=key)))


# ---------------------------------------------------------------- network uncertainty

@dataclass(frozen=True)
class NetworkUncertaintySpec:
    """Relative standard deviations of series R and X per branch class."""

    line_r_rel_sigma: float = 0.05
    line_x_rel_sigma: float = 0.005
    xfmr_r_rel_sigma: float = 0.01
    xfmr_x_rel_sigma: float = 0.001
    enabled: bool = False

    def __post_init__(self):
        for k, v in asdict(self).items():
            if k != "enabled" and not v >= 0:
                raise ConfigurationError(f"{k} must be non-negative")


def perturb_impedances(net: Network, spec: NetworkUncertaintySpec, rng: np.random.Generator):
    """Multiplicative Gaussian noise on in-service branch R and X.

    Returns ``(r, x, resampled)`` in ``net.arrays`` order. A branch whose
    perturbed impedance vanishes is redrawn.
    """
    a = net.arrays
    sr = np.where(a.is_transformer, spec.xfmr_r_rel_sigma, spec.line_r_rel_sigma)
    sx = np.where(a.is_transformer, spec.xfmr_x_rel_sigma, spec.line_x_rel_sigma)
    eps = rng.standard_normal((len(a.r), 2))
    r = a.r * (1.0 + sr * eps[:, 0])
    x = a.x * (1.0 + sx * eps[:, 1])
    resampled = 0
    bad = np.flatnonzero(r * r + x * x <= 0)
    while bad.size:
        resampled += bad.size
        e = rng.standard_normal((bad.size, 2))
        r[bad] = a.r[bad] * (1.0 + sr[bad] * e[:, 0])
        x[bad] = a.x[bad] * (1.0 + sx[bad] * e[:, 1])
        bad = bad[r[bad] ** 2 + x[bad] ** 2 <= 0]
    return r, x, resampled


def sample_network(net: Network, spec: NetworkUncertaintySpec, rng: np.random.Generator) -> Network:
    """Copy of ``net`` with perturbed series impedances."""
    r, x, _ = perturb_impedances(net, spec, rng)
    branches = list(net.branches)
    for k, pos in enumerate(net.arrays.positions):
        branches[pos] = replace(branches[pos], r_series=float(r[k]), x_series=float(x[k]))
    return Network(net.base_mva, net.buses, branches, net.generators)


# ---------------------------------------------------------------- configuration

@dataclass(frozen=True)
class Threshold:
    quantity: str
    value: float
    absolute: bool = False

    @property
    def label(self) -> str:
        return f"{'|' if self.absolute else ''}{self.quantity}{'|' if self.absolute else ''} > {self.value:g}"


@dataclass(frozen=True)
class CampaignConfig:
    case: str
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    net_uncertainty: NetworkUncertaintySpec = field(default_factory=NetworkUncertaintySpec)
    seed: int = 0
    max_samples: int = 10_000
    stop_rule: str = "all"
    rel_tol: float = 0.05
    confidence: float = 0.99
    batch_size: int = 32
    track: tuple = ()
    thresholds: tuple = ()
    percentiles: tuple = (0.001, 0.01, 0.5, 0.99, 0.999)
    hist_bins: int = DEFAULT_BINS
    pilot_samples: int = 1000
    sample_cap: int = DEFAULT_SAMPLE_CAP
    workers: int = 1
    checkpoint_every: int = 10_000
    measurement_file: str | None = None

    def __post_init__(self):
        if self.max_samples < 1:
            raise ConfigurationError("max_samples must be at least 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be at least 1")
        if self.stop_rule not in ("any", "all", "none"):
            raise ConfigurationError(f"unknown stop rule {self.stop_rule!r}")
        if self.workers < 1:
            raise ConfigurationError("workers must be at least 1")
        object.__setattr__(self, "track", tuple(self.track))
        object.__setattr__(self, "percentiles", tuple(self.percentiles))
        object.__setattr__(self, "thresholds", tuple(
            t if isinstance(t, Threshold) else parse_threshold(t) for t in self.thresholds))

    @classmethod
    def from_dict(cls, d: dict) -> "CampaignConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown campaign keys: {sorted(unknown)}")
        if "case" not in d:
            raise ConfigurationError("campaign config needs a 'case'")
        if isinstance(d.get("noise"), dict):
            d["noise"] = NoiseSpec.from_dict(d["noise"])
        if isinstance(d.get("net_uncertainty"), dict):
            try:
                d["net_uncertainty"] = NetworkUncertaintySpec(**d["net_uncertainty"])
            except TypeError as exc:
                raise ConfigurationError(str(exc)) from None
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "CampaignConfig":
        import yaml

        text = Path(path).read_text()
        try:
            d = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
        except (ValueError, yaml.YAMLError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigurationError(f"config {path} is not a mapping")
        base = Path(path).parent
        for key in ("case", "measurement_file"):
            v = d.get(key)
            if v and not Path(v).is_absolute() and (base / v).exists():
                d[key] = str(base / v)
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["thresholds"] = [f"{t.quantity}:{t.value!r}" + (":abs" if t.absolute else "") for t in self.thresholds]
        d["track"] = list(self.track)
        d["percentiles"] = list(self.percentiles)
        return d

    def digest(self) -> str:
        d = self.to_dict()
        d.pop("workers")
        d.pop("checkpoint_every")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def parse_threshold(text: str) -> Threshold:
    """``branch:<id>:<value>`` (absolute active from-end flow) or ``<quantity>:<value>[:abs]``."""
    parts = str(text).split(":")
    absolute = parts[-1] == "abs"
    if absolute:
        parts = parts[:-1]
    try:
        value = float(parts[-1])
    except (ValueError, IndexError):
        raise ConfigurationError(f"bad threshold {text!r}") from None
    quantity = ":".join(parts[:-1])
    if quantity.startswith("branch:") and quantity.count(":") == 1:
        quantity += ":p"
        absolute = True
    if not quantity:
        raise ConfigurationError(f"bad threshold {text!r}")
    return Threshold(quantity, value, absolute)


@dataclass(frozen=True)
class Tracked:
    names: tuple
    bus_pos: np.ndarray  # dense bus index per bus quantity pair (vm, va)
    branch_pos: np.ndarray  # index into net.arrays per branch quantity pair (p, q)


def resolve_tracking(net: Network, track) -> Tracked:
    names, bus_pos, branch_pos = [], [], []
    bus_names, branch_names = [], []
    for spec in track:
        kind, _, ident = str(spec).partition(":")
        if kind == "bus":
            try:
                bus_pos.append(net.bus_index[int(ident)])
            except (ValueError, KeyError):
                raise ConfigurationError(f"tracked bus {ident!r} not in network") from None
            bus_names += [f"bus:{ident}:vm", f"bus:{ident}:va"]
        elif kind == "branch":
            pos = resolve_branch(net, ident)
            branch_pos.append(int(np.searchsorted(net.arrays.positions, pos)))
            branch_names += [f"branch:{ident}:p", f"branch:{ident}:q"]
        else:
            raise ConfigurationError(f"cannot track {spec!r}; use bus:<id> or branch:<from>-<to>")
    names = list(METRICS) + bus_names + branch_names
    return Tracked(tuple(names), np.array(bus_pos, dtype=np.int64), np.array(branch_pos, dtype=np.int64))


def resolve_branch(net: Network, ident: str) -> int:
    """Branch position from ``<from>-<to>`` or a 1-based case-file row number."""
    if "-" in ident:
        f, _, t = ident.partition("-")
        try:
            return net.find_branch(int(f), int(t))
        except ValueError:
            raise ConfigurationError(f"bad branch id {ident!r}") from None
    try:
        row = int(ident)
    except ValueError:
        raise ConfigurationError(f"bad branch id {ident!r}") from None
    if not 1 <= row <= len(net.branches) or not net.branches[row - 1].in_service:
        raise ConfigurationError(f"branch row {row} missing or out of service")
    return row - 1


def tracked_values(net: Network, tracked: Tracked, v: np.ndarray, r=None, x=None) -> np.ndarray:
    out = []
    if len(tracked.bus_pos):
        vb = v[tracked.bus_pos]
        out.append(np.column_stack([np.abs(vb), np.angle(vb)]).ravel())
    if len(tracked.branch_pos):
        a = net.arrays
        bp = tracked.branch_pos
        yff, yft, _, _ = branch_admittances(a, r, x)
        vf, vt = v[a.f[bp]], v[a.t[bp]]
        s = vf * np.conj(yff[bp] * vf + yft[bp] * vt)
        out.append(np.column_stack([s.real, s.imag]).ravel())
    return np.concatenate(out) if out else np.zeros(0)


# ---------------------------------------------------------------- campaign context

@dataclass(eq=False)
class CampaignContext:
    """Immutable inputs shared read-only by all workers."""

    config: CampaignConfig
    net: Network
    x_true: VoltageState
    truth: TruthProfile
    assignment: DeviceAssignment
    tracked: Tracked
    case_digest: str
    mode: str = "mc"

    @property
    def names(self) -> tuple:
        if self.mode == "compare":
            return tuple(f"{est}:{m}" for est in ("ecf", "wls") for m in METRICS) + ("wls:converged",)
        return self.tracked.names

    def truth_values(self) -> dict:
        if self.mode == "compare":
            return {}
        vals = tracked_values(self.net, self.tracked, self.x_true.complex)
        names = self.tracked.names[len(METRICS):]
        return dict(zip(names, vals.tolist()))


def build_context(config: CampaignConfig, mode: str = "mc") -> CampaignContext:
    text = case_text(config.case)
    net = parse_case(text)
    x_true = net.true_state()
    truth = TruthProfile.compute(net, x_true, build_ybus(net))
    if config.measurement_file:
        m = MeasurementSet.from_json(Path(config.measurement_file).read_text())
        assignment = DeviceAssignment(
            pmu_buses=tuple(int(b) for b in m.pmu_bus), rtu_buses=tuple(int(b) for b in m.rtu_bus),
            perfect_pmus=frozenset(int(b) for b, pf in zip(m.pmu_bus, m.pmu_perfect) if pf),
            reference_bus=m.reference_bus,
        )
    else:
        assignment = assign_devices(net, config.noise, derive_stream(config.seed, 0, "assignment"))
    return CampaignContext(
        config=config, net=net, x_true=x_true, truth=truth, assignment=assignment,
        tracked=resolve_tracking(net, config.track),
        case_digest=hashlib.sha256(text.encode()).hexdigest(), mode=mode,
    )


def sample_measurements(ctx: CampaignContext, k: int) -> MeasurementSet:
    return generate_measurements(ctx.net, ctx.x_true, ctx.assignment, ctx.config.noise,
                                 derive_stream(ctx.config.seed, k, "measurement"), ctx.truth)


@dataclass
class ChunkResult:
    chunk: int
    start: int
    values: np.ndarray  # (n, q); NaN rows for degenerate samples
    ok: np.ndarray  # bool per sample
    reasons: list
    meas_resampled: int = 0
    net_resampled: int = 0
    draws_meas: int = 0
    draws_net: int = 0


def _mc_sample(ctx: CampaignContext, k: int):
    cfg = ctx.config
    mset = sample_measurements(ctx, k)
    r = x = None
    net_res = 0
    if cfg.net_uncertainty.enabled:
        r, x, net_res = perturb_impedances(ctx.net, cfg.net_uncertainty, derive_stream(cfg.seed, k, "network"))
    res = estimate(ctx.net, mset, r, x)
    met = state_metrics(res.x_hat, ctx.x_true, res.r_z)
    vals = np.concatenate([[met.x_sigma, met.x_max, met.r_z],
                           tracked_values(ctx.net, ctx.tracked, res.x_hat.complex, r, x)])
    return vals, mset.resample_count, net_res


def _compare_sample(ctx: CampaignContext, k: int):
    mset = sample_measurements(ctx, k)
    res = estimate(ctx.net, mset)
    ecf = state_metrics(res.x_hat, ctx.x_true, res.r_z)
    w = wls_solve(ctx.net, mset, ctx.config.noise)
    wm = state_metrics(w.x_hat, ctx.x_true, w.r_z)
    vals = np.array([ecf.x_sigma, ecf.x_max, ecf.r_z, wm.x_sigma, wm.x_max, wm.r_z, float(w.converged)])
    return vals, mset.resample_count, 0


def run_chunk(ctx: CampaignContext, chunk: int) -> ChunkResult:
    cfg = ctx.config
    start = chunk * cfg.batch_size
    stop = min(start + cfg.batch_size, cfg.max_samples)
    q = len(ctx.names)
    values = np.full((stop - start, q), np.nan)
    ok = np.zeros(stop - start, dtype=bool)
    reasons = []
    out = ChunkResult(chunk, start, values, ok, reasons)
    fn = _compare_sample if ctx.mode == "compare" else _mc_sample
    n_rtu = len(ctx.assignment.rtu_buses)
    n_live = len(ctx.net.arrays.positions)
    for j, k in enumerate(range(start, stop)):
        try:
            vals, mres, nres = fn(ctx, k)
        except NoReferenceError:
            raise
        except (SolverError, DegenerateMeasurementError) as exc:
            reasons.append((k, str(exc)))
            continue
        values[j] = vals
        ok[j] = True
        out.meas_resampled += mres
        out.net_resampled += nres
        out.draws_meas += n_rtu + mres
        if cfg.net_uncertainty.enabled and ctx.mode == "mc":
            out.draws_net += n_live + nres
    return out


_WORKER_CTX: CampaignContext | None = None


def _init_worker(ctx):
    global _WORKER_CTX
    _WORKER_CTX = ctx


def _worker_chunk(chunk):
    return run_chunk(_WORKER_CTX, chunk)


# ---------------------------------------------------------------- summary

@dataclass
class McSummary:
    """Merged campaign statistics. ``run_info`` holds the non-reproducible parts (timing)."""

    schema: str
    config_digest: str
    case_digest: str
    seed: int
    mode: str
    n_samples: int
    n_ok: int
    degenerate: int
    degenerate_reasons: list
    stopped_by_rule: bool
    resampling: dict
    quantities: dict
    percentiles: list
    tails: list
    warnings: list
    run_info: dict = field(default_factory=dict)

    def to_dict(self, include_run_info: bool = True) -> dict:
        d = asdict(self)
        if not include_run_info:
            d.pop("run_info")
        return d

    def canonical_json(self) -> str:
        """Deterministic serialization (no timing): identical for any worker count."""
        return json.dumps(self.to_dict(include_run_info=False), sort_keys=True, indent=1) + "\n"

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def mean_ci(self, name: str) -> tuple[float, float]:
        q = self.quantities[name]
        return q["mean"], q["ci_half_width"]


class Accumulator:
    """Merges chunk results in chunk order and evaluates the stopping rule."""

    def __init__(self, ctx: CampaignContext):
        self.ctx = ctx
        cfg = ctx.config
        self.summaries = {n: QuantitySummary(n, sample_cap=cfg.sample_cap) for n in ctx.names}
        self.chunks: list[ChunkResult] = []
        self.n_samples = 0
        self.edges_set = False
        self.stopped_by_rule = False

    def add(self, res: ChunkResult):
        self.chunks.append(res)
        self.n_samples += len(res.ok)
        good = res.values[res.ok]
        for j, name in enumerate(self.ctx.names):
            self.summaries[name].add(good[:, j])
        if not self.edges_set and self.n_ok >= self.ctx.config.pilot_samples:
            self._fix_edges()

    @property
    def n_ok(self) -> int:
        return next(iter(self.summaries.values())).count if self.summaries else 0

    def _fix_edges(self):
        bins = self.ctx.config.hist_bins
        for s in self.summaries.values():
            pilot = s.values()[: self.ctx.config.pilot_samples]
            s.set_edges(pilot_edges(pilot, bins) if pilot.size else np.linspace(0, 1, bins + 1))
        self.edges_set = True

    def should_stop(self) -> bool:
        cfg = self.ctx.config
        if cfg.stop_rule == "none":
            return False
        if self.ctx.mode == "compare":
            groups = [[self.summaries[f"{e}:{m}"] for m in METRICS] for e in ("ecf", "wls")]
        else:
            groups = [[self.summaries[m] for m in METRICS]]
        return all(stopping_check(g, cfg.stop_rule, cfg.rel_tol, cfg.confidence) for g in groups)

    def summary(self) -> McSummary:
        cfg = self.ctx.config
        if not self.edges_set:
            self._fix_edges()
        truth = self.ctx.truth_values()
        quantities, pct, tails = {}, [], []
        for name, s in self.summaries.items():
            m = s.moments
            entry = {"count": m.count, "mean": m.mean, "variance": m.variance, "std": m.std,
                     "min": m.min if m.count else None, "max": m.max if m.count else None,
                     "ci_half_width": mean_ci(m, cfg.confidence)[1] if m.count >= 2 else None,
                     "truth": truth.get(name),
                     "hist_edges": s.histogram.edges.tolist(), "hist_counts": s.histogram.counts.tolist()}
            quantities[name] = entry
            if s.count and s.retained == s.count:
                sv = s.sorted_values()
                for p in cfg.percentiles:
                    row = {"quantity": name, "p": p, "point": None, "ci_low": None, "ci_high": None,
                           "confidence": cfg.confidence}
                    try:
                        e = percentile_ci(sv, p, cfg.confidence)
                        row.update(point=e.point, ci_low=e.ci_low, ci_high=e.ci_high)
                    except InsufficientDataError as exc:
                        row["point"] = float(sv[min(max(math.ceil(p * len(sv)), 1), len(sv)) - 1])
                        row["note"] = str(exc)
                    pct.append(row)
        for t in (cfg.thresholds if self.ctx.mode == "mc" else ()):
            if t.quantity not in self.summaries:
                raise ConfigurationError(f"threshold on untracked quantity {t.quantity!r}")
            v = self.summaries[t.quantity].values()
            if t.absolute:
                v = np.abs(v)
            if v.size:
                te = tail_probability(v, t.value, cfg.confidence)
                tails.append({"label": t.label, "quantity": t.quantity, "threshold": t.value,
                              "absolute": t.absolute, "fraction": te.fraction, "ci_low": te.ci_low,
                              "ci_high": te.ci_high, "exceed": te.exceed, "count": te.count})
        degenerate = self.n_samples - self.n_ok
        reasons = [r for c in self.chunks for r in c.reasons]
        warnings = []
        if self.n_samples and degenerate / self.n_samples > 0.001:
            warnings.append(f"{degenerate} of {self.n_samples} samples degenerate (> 0.1%)")
        if self.ctx.mode == "compare":
            nc = int(np.sum(1 - self.summaries["wls:converged"].values()))
            if nc:
                warnings.append(f"WLS did not converge on {nc} sample(s)")
        resampling = {
            "measurement_accepted": sum(c.draws_meas - c.meas_resampled for c in self.chunks),
            "network_accepted": sum(c.draws_net - c.net_resampled for c in self.chunks),
            "measurement_draws": sum(c.draws_meas for c in self.chunks),
            "measurement_resampled": sum(c.meas_resampled for c in self.chunks),
            "network_draws": sum(c.draws_net for c in self.chunks),
            "network_resampled": sum(c.net_resampled for c in self.chunks),
        }
        return McSummary(
            schema=SUMMARY_SCHEMA, config_digest=cfg.digest(), case_digest=self.ctx.case_digest,
            seed=cfg.seed, mode=self.ctx.mode, n_samples=self.n_samples, n_ok=self.n_ok,
            degenerate=degenerate, degenerate_reasons=[list(r) for r in reasons[:20]],
            stopped_by_rule=self.stopped_by_rule, resampling=resampling, quantities=quantities,
            percentiles=pct, tails=tails, warnings=warnings,
        )


# ---------------------------------------------------------------- checkpointing

def _save_checkpoint(path: Path, ctx: CampaignContext, chunks: list[ChunkResult]):
    path = Path(path)
    payload = {
        "config_digest": ctx.config.digest(),
        "mode": ctx.mode,
        "chunks": [
            {"chunk": c.chunk, "start": c.start, "values": c.values.tolist(), "ok": c.ok.tolist(),
             "reasons": c.reasons, "meas_resampled": c.meas_resampled, "net_resampled": c.net_resampled,
             "draws_meas": c.draws_meas, "draws_net": c.draws_net}
            for c in chunks
        ],
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(payload))
    os.replace(tmp, path)


def _load_checkpoint(path: Path, ctx: CampaignContext) -> list[ChunkResult]:
    d = json.loads(Path(path).read_text())
    if d["config_digest"] != ctx.config.digest() or d["mode"] != ctx.mode:
        raise ConfigurationError(f"checkpoint {path} was written for a different campaign")
    out = []
    for c in d["chunks"]:
        vals = np.array(c["values"], dtype=float).reshape(len(c["ok"]), len(ctx.names))
        out.append(ChunkResult(c["chunk"], c["start"], vals, np.array(c["ok"], dtype=bool),
                               [tuple(r) for r in c["reasons"]], c["meas_resampled"], c["net_resampled"],
                               c["draws_meas"], c["draws_net"]))
    return out


# ---------------------------------------------------------------- driver

@dataclass
class CampaignRun:
    summary: McSummary
    outcomes: np.ndarray  # (n_samples, q) per-sample values in sample order
    names: tuple
    complete: bool
    context: CampaignContext


def run_campaign(config: CampaignConfig, mode: str = "mc", checkpoint: str | Path | None = None,
                 max_chunks: int | None = None, context: CampaignContext | None = None) -> CampaignRun:
    """Run (or resume) a campaign.

    ``checkpoint`` names a file that is updated every ``checkpoint_every``
    samples and read back on start. ``max_chunks`` bounds how many new chunks
    this call computes; the run is then reported incomplete and can be resumed.
    """
    t0 = time.perf_counter()
    ctx = context or build_context(config, mode)
    cfg = ctx.config
    acc = Accumulator(ctx)
    n_chunks = math.ceil(cfg.max_samples / cfg.batch_size)
    done = 0
    if checkpoint and Path(checkpoint).exists():
        for c in _load_checkpoint(checkpoint, ctx):
            acc.add(c)
            done += 1
            if acc.should_stop():
                acc.stopped_by_rule = True
                break
    budget = n_chunks if max_chunks is None else min(n_chunks, done + max_chunks)
    ckpt_chunks = max(1, cfg.checkpoint_every // cfg.batch_size)
    since_ckpt = 0
    new_samples = 0
    pool = None
    try:
        if cfg.workers > 1:
            pool = ProcessPoolExecutor(max_workers=cfg.workers, mp_context=mp.get_context("fork"),
                                       initializer=_init_worker, initargs=(ctx,))
        nxt = done
        while not acc.stopped_by_rule and nxt < budget:
            wave = list(range(nxt, min(budget, nxt + (2 * cfg.workers if pool else 1))))
            results = pool.map(_worker_chunk, wave) if pool else [run_chunk(ctx, c) for c in wave]
            for res in results:
                acc.add(res)
                new_samples += len(res.ok)
                nxt = res.chunk + 1
                since_ckpt += 1
                if acc.should_stop():
                    acc.stopped_by_rule = True
                    break
                if checkpoint and since_ckpt >= ckpt_chunks:
                    _save_checkpoint(checkpoint, ctx, acc.chunks)
                    since_ckpt = 0
    finally:
        if pool:
            pool.shutdown(cancel_futures=True)
    complete = acc.stopped_by_rule or len(acc.chunks) >= n_chunks
    if checkpoint:
        _save_checkpoint(checkpoint, ctx, acc.chunks)
    summary = acc.summary()
    wall = time.perf_counter() - t0
    summary.run_info = {"wall_clock_s": wall, "new_samples": new_samples,
                        "samples_per_s": new_samples / wall if wall > 0 else None,
                        "workers": cfg.workers, "complete": complete, "version": __version__}
    outcomes = (np.concatenate([c.values for c in acc.chunks]) if acc.chunks
                else np.zeros((0, len(ctx.names))))
    return CampaignRun(summary, outcomes, ctx.names, complete, ctx)


# ---------------------------------------------------------------- output files

def safe_name(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-." else "_" for ch in name)


def atomic_write(path: Path, text: str):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def percentiles_csv(summary: McSummary) -> str:
    lines = ["quantity,p,point,ci_low,ci_high,confidence"]
    for r in summary.percentiles:
        vals = ["" if r[k] is None else repr(r[k]) for k in ("point", "ci_low", "ci_high")]
        lines.append(f"{r['quantity']},{r['p']!r},{vals[0]},{vals[1]},{vals[2]},{r['confidence']!r}")
    return "\n".join(lines) + "\n"


def histogram_csv(q: dict) -> str:
    edges, counts = q["hist_edges"], q["hist_counts"]
    lines = ["bin_low,bin_high,count", f"-inf,{edges[0]!r},{counts[0]}"]
    lines += [f"{edges[k]!r},{edges[k + 1]!r},{counts[k + 1]}" for k in range(len(edges) - 1)]
    lines.append(f"{edges[-1]!r},inf,{counts[-1]}")
    return "\n".join(lines) + "\n"


def write_outputs(run: CampaignRun, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    s = run.summary
    written = []
    atomic_write(out / "summary.json", s.to_json())
    written.append(out / "summary.json")
    for name, q in s.quantities.items():
        p = out / f"hist_{safe_name(name)}.csv"
        atomic_write(p, histogram_csv(q))
        written.append(p)
    atomic_write(out / "percentiles.csv", percentiles_csv(s))
    written.append(out / "percentiles.csv")
    log_lines = [
        f"ecfse {__version__}",
        f"seed {s.seed}",
        f"config_digest {s.config_digest}",
        f"case_digest {s.case_digest}",
        f"noise_redraw around the true state for every sample (device placement fixed)",
        f"samples {s.n_samples} ok {s.n_ok} degenerate {s.degenerate} stopped_by_rule {s.stopped_by_rule}",
        f"wall_clock_s {s.run_info.get('wall_clock_s')}",
        f"samples_per_s {s.run_info.get('samples_per_s')}",
        f"workers {s.run_info.get('workers')}",
    ]
    for t in s.tails:
        log_lines.append(f"P({t['label']}) = {t['fraction']:.6g} [{t['ci_low']:.6g}, {t['ci_high']:.6g}]")
    log_lines += [f"WARNING {w}" for w in s.warnings]
    atomic_write(out / "campaign.log", "\n".join(log_lines) + "\n")
    written.append(out / "campaign.log")
    return written
