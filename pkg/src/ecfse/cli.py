"""Command-line front end: ``ecfse {gen-meas,estimate,wls,compare,mc}``.

Exit codes: 0 success, 1 usage or I/O error, 2 case/measurement parse error,
3 model or configuration error (including a missing phasor reference),
4 numerical failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import EcfseError, ParseError
from .measmodel import MeasurementSet, NoiseSpec
from .mcengine import (METRICS, CampaignConfig, atomic_write, build_context,
                       run_campaign, sample_measurements, write_outputs)
from .netmodel import case_text, parse_case
from .sesolver import estimate
from .stats import state_metrics
from .wlsref import wls_solve

log = logging.getLogger("ecfse")

PRESETS = {
    "default": NoiseSpec,
    "single-reference": NoiseSpec.single_reference,
    "noiseless": NoiseSpec.noiseless,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ecfse", description="Equivalent-circuit linear state estimation and Monte Carlo campaigns.")
    p.add_argument("--version", action="version", version=f"ecfse {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, needs_out=True):
        sp.add_argument("--case", help="case file path or bundled name (case9, case14, case118, ...)")
        sp.add_argument("--config", help="campaign config (JSON or YAML)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--preset", choices=sorted(PRESETS), help="noise preset used when the config has none")
        sp.add_argument("-v", "--verbose", action="count", default=0)
        if needs_out:
            sp.add_argument("--out", required=True, help="output directory")

    g = sub.add_parser("gen-meas", help="draw one synthetic measurement set")
    common(g)
    for name, helptext in (("estimate", "linear equivalent-circuit estimate"), ("wls", "nonlinear WLS estimate")):
        e = sub.add_parser(name, help=helptext)
        common(e)
        e.add_argument("--meas", required=True, help="measurement-set JSON from gen-meas")
    for name, helptext in (("compare", "ECF vs WLS campaign on identical measurements"),
                           ("mc", "Monte Carlo campaign")):
        m = sub.add_parser(name, help=helptext)
        common(m)
        m.add_argument("--workers", type=int)
        m.add_argument("--samples", type=int, help="maximum number of samples")
        m.add_argument("--stop-rule", choices=("any", "all", "none"))
        m.add_argument("--meas", help="pin device placement to this measurement file")
        if name == "mc":
            m.add_argument("--track", action="append", default=[],
                           help="comma-separated bus:<id> / branch:<from>-<to> (repeatable)")
            m.add_argument("--threshold", action="append", default=[], help="branch:<id>:<value> (repeatable)")
            m.add_argument("--network-uncertainty", action="store_true", help="perturb branch R and X per sample")
            m.add_argument("--no-resume", action="store_true", help="ignore an existing checkpoint")
    return p


def _load_config(args) -> CampaignConfig:
    d: dict = {}
    if args.config:
        import yaml

        path = Path(args.config)
        try:
            text = path.read_text()
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from None
        try:
            d = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
        except (ValueError, yaml.YAMLError) as exc:
            raise ParseError(f"config {path}: {exc}") from None
        if not isinstance(d, dict):
            raise UsageError(f"config {path} is not a mapping")
        for key in ("case", "measurement_file"):
            v = d.get(key)
            if v and not Path(v).is_absolute() and (path.parent / v).exists():
                d[key] = str(path.parent / v)
    if args.case:
        d["case"] = args.case
    if "case" not in d:
        raise UsageError("no case given (use --case or a config with 'case')")
    if args.seed is not None:
        d["seed"] = args.seed
    if "noise" not in d:
        d["noise"] = PRESETS[args.preset or "default"]().to_dict()
    for attr, key in (("workers", "workers"), ("samples", "max_samples"), ("stop_rule", "stop_rule"),
                      ("meas", "measurement_file")):
        v = getattr(args, attr, None)
        if v is not None and not (attr == "meas" and args.command in ("estimate", "wls")):
            d[key] = v
    if getattr(args, "track", None):
        d["track"] = list(d.get("track", [])) + [t for arg in args.track for t in arg.split(",") if t]
    if getattr(args, "threshold", None):
        d["thresholds"] = list(d.get("thresholds", [])) + args.threshold
    if getattr(args, "network_uncertainty", False):
        nu = dict(d.get("net_uncertainty") or {})
        nu["enabled"] = True
        d["net_uncertainty"] = nu
    return CampaignConfig.from_dict(d)


def _sha(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def _manifest(out: Path, command: str, cfg: CampaignConfig, files, extra=None):
    m = {
        "tool": "ecfse",
        "version": __version__,
        "command": command,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "config_digest": cfg.digest(),
        "case_digest": _sha(case_text(cfg.case)),
        "files": {Path(f).name: hashlib.sha256(Path(f).read_bytes()).hexdigest() for f in files},
    }
    m.update(extra or {})
    atomic_write(out / "manifest.json", json.dumps(m, sort_keys=True, indent=1) + "\n")


def _read_meas(path) -> MeasurementSet:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read measurement file: {exc}") from None
    return MeasurementSet.from_json(text)


def cmd_gen_meas(args, cfg: CampaignConfig, out: Path) -> dict:
    ctx = build_context(cfg)
    mset = sample_measurements(ctx, 0)
    path = out / "measurements.json"
    atomic_write(path, mset.to_json())
    log.info("%d PMU(s), %d RTU(s), reference bus %s", mset.n_pmu, mset.n_rtu, mset.reference_bus)
    return {"files": [path]}


def _state_csv(net, v) -> str:
    lines = ["bus,vm,va,vre,vim"]
    for b, z in zip(net.bus_ids(), v):
        lines.append(f"{int(b)},{abs(z)!r},{float(np.angle(z))!r},{z.real!r},{z.imag!r}")
    return "\n".join(lines) + "\n"


def cmd_estimate(args, cfg: CampaignConfig, out: Path, method: str = "ecf") -> dict:
    net = parse_case(case_text(cfg.case))
    mset = _read_meas(args.meas)
    x_true = net.true_state()
    if method == "ecf":
        res = estimate(net, mset)
        met = state_metrics(res.x_hat, x_true, res.r_z)
        report = {"method": "ecf", "objective": res.objective_value, "kcl_residual_norm": res.kcl_residual_norm}
    else:
        res = wls_solve(net, mset, cfg.noise)
        met = state_metrics(res.x_hat, x_true, res.r_z)
        report = {"method": "wls", "iterations": res.iterations, "converged": res.converged,
                  "final_step_norm": res.final_step_norm, "r_z_weighted": res.r_z_weighted}
    report.update(x_sigma=met.x_sigma, x_max=met.x_max, r_z=met.r_z, n_bus=net.n_bus,
                  n_pmu=mset.n_pmu, n_rtu=mset.n_rtu)
    rpath, spath = out / f"{method}_result.json", out / f"{method}_state.csv"
    atomic_write(rpath, json.dumps(report, sort_keys=True, indent=1) + "\n")
    atomic_write(spath, _state_csv(net, res.x_hat.complex))
    print(f"x_sigma {met.x_sigma:.6e}  x_max {met.x_max:.6e}  r_z {met.r_z:.6e}")
    return {"files": [rpath, spath], "extra": {"measurement_digest": _sha(Path(args.meas).read_text())}}


def format_compare(summary) -> tuple[str, str]:
    """Text table and CSV with one row per estimator."""
    header = ["estimator"] + [f"{m}±ci" for m in METRICS]
    rows, csv = [], ["estimator," + ",".join(f"{m},{m}_ci99" for m in METRICS)]
    for est in ("ecf", "wls"):
        cells, nums = [est.upper()], []
        for m in METRICS:
            q = summary.quantities[f"{est}:{m}"]
            half = q["ci_half_width"] if q["ci_half_width"] is not None else float("nan")
            cells.append(f"{q['mean']:.3e} ± {half:.2e}")
            nums += [repr(q["mean"]), repr(half)]
        rows.append(cells)
        csv.append(est + "," + ",".join(nums))
    widths = [max(len(r[k]) for r in [header] + rows) for k in range(len(header))]
    fmt = lambda r: "  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()
    text = "\n".join([fmt(header)] + [fmt(r) for r in rows])
    text += f"\n\nsamples {summary.n_samples}  degenerate {summary.degenerate}\n"
    text += "".join(f"warning: {w}\n" for w in summary.warnings)
    return text, "\n".join(csv) + "\n"


def cmd_compare(args, cfg: CampaignConfig, out: Path) -> dict:
    run = run_campaign(cfg, mode="compare")
    text, csv = format_compare(run.summary)
    files = [out / "compare.txt", out / "compare.csv", out / "summary.json"]
    atomic_write(files[0], text)
    atomic_write(files[1], csv)
    atomic_write(files[2], run.summary.to_json())
    print(text, end="")
    return {"files": files}


def cmd_mc(args, cfg: CampaignConfig, out: Path) -> dict:
    ckpt = out / "checkpoint.json"
    if args.no_resume and ckpt.exists():
        ckpt.unlink()
    run = run_campaign(cfg, checkpoint=ckpt)
    files = write_outputs(run, out)
    s = run.summary
    print(f"samples {s.n_samples}  degenerate {s.degenerate}  stopped_by_rule {s.stopped_by_rule}")
    for m in METRICS:
        q = s.quantities[m]
        ci = q["ci_half_width"]
        print(f"{m} {q['mean']:.6e}" + (f" ± {ci:.2e}" if ci is not None else ""))
    for t in s.tails:
        print(f"P({t['label']}) = {t['fraction']:.4%}  99% CI [{t['ci_low']:.4%}, {t['ci_high']:.4%}]")
    for w in s.warnings:
        print(f"warning: {w}")
    return {"files": files}


COMMANDS = {
    "gen-meas": cmd_gen_meas,
    "estimate": lambda a, c, o: cmd_estimate(a, c, o, "ecf"),
    "wls": lambda a, c, o: cmd_estimate(a, c, o, "wls"),
    "compare": cmd_compare,
    "mc": cmd_mc,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"ecfse: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        res = COMMANDS[args.command](args, cfg, out)
        _manifest(out, args.command, cfg, res["files"], res.get("extra"))
    except UsageError as exc:
        print(f"ecfse: error: {exc}", file=sys.stderr)
        return 1
    except EcfseError as exc:
        print(f"ecfse: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"ecfse: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
