"""Command-line entry point: ``vbspin simulate|sweep|fit|presets``.

Every command writes CSV/JSON files into ``--out`` plus a ``manifest.json``
recording the command, config hash, presets, input and output digests, wall
time and version.  Exit codes: 0 success, 2 usage/config/data error,
3 fit did not converge.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import re
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path
from typing import Sequence

import numpy as np

from . import fitting as ft
from .core import CONFIG_ENV_VAR, Config, ConfigError, MagneticField, load_config
from .instrument import FidelityModel, Instrument, IRFModel
from .lindblad import SweepPoint, sweep_maps, sweep_point
from .protocols import (
    cw_odmr_spectrum,
    excited_state_differential_protocol,
    pl_time_trace_protocol,
    spin_resolved_protocol,
)

EXIT_OK, EXIT_USAGE, EXIT_NOT_CONVERGED = 0, 2, 3


class UsageError(Exception):
    pass


# ------------------------------------------------------------ manifest


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(cfg: Config) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class RunManifest:
    command: list[str]
    config_hash: str
    presets: list[str]
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    wall_time_s: float = 0.0
    version: str = field(default_factory=_version)

    def add_output(self, path) -> Path:
        path = Path(path)
        self.outputs[str(path)] = sha256_file(path)
        return path

    def add_input(self, path) -> None:
        self.inputs[str(path)] = sha256_file(path)

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / "manifest.json"
        atomic_write_text(path, json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n")
        return path


# ------------------------------------------------------------ parsing helpers


def parse_power(text: str) -> float:
    """'10mW', '10', '0.01W' -> mW."""
    m = re.fullmatch(r"\s*([0-9.eE+-]+)\s*(mW|W|uW)?\s*", text)
    if not m:
        raise argparse.ArgumentTypeError(f"cannot parse power {text!r}")
    try:
        v = float(m.group(1))
    except ValueError:
        raise argparse.ArgumentTypeError(f"cannot parse power {text!r}") from None
    v *= {"mW": 1.0, None: 1.0, "W": 1e3, "uW": 1e-3}[m.group(2)]
    if not v > 0:
        raise argparse.ArgumentTypeError("power must be > 0")
    return v


def parse_range(text: str) -> np.ndarray:
    """'a:b:step' (inclusive) or a comma list."""
    try:
        if ":" in text:
            parts = [float(x) for x in text.split(":")]
            if len(parts) != 3:
                raise ValueError
            a, b, s = parts
            if s <= 0 or b <= a:
                raise argparse.ArgumentTypeError(f"empty range {text!r}")
            n = int(math.floor((b - a) / s + 1e-9)) + 1
            return a + s * np.arange(n)
        vals = np.array([float(x) for x in text.split(",") if x.strip()])
    except ValueError:
        raise argparse.ArgumentTypeError(f"cannot parse range {text!r}") from None
    if vals.size == 0:
        raise argparse.ArgumentTypeError(f"empty range {text!r}")
    return np.unique(vals)


def parse_fix(items: Sequence[str]) -> dict:
    out = {}
    for it in items or ():
        if "=" not in it:
            raise UsageError(f"--fix expects name=value, got {it!r}")
        k, v = it.split("=", 1)
        try:
            out[k.strip()] = float(v)
        except ValueError:
            raise UsageError(f"--fix value for {k!r} is not a number") from None
    return out


def write_csv(path, header: Sequence[str], rows) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    return path


# ------------------------------------------------------------ context


@dataclass
class Context:
    args: argparse.Namespace
    cfg: Config
    out: Path
    manifest: RunManifest

    def rates(self, name: str):
        try:
            return self.cfg.preset(name)
        except KeyError as exc:
            raise UsageError(str(exc.args[0])) from None

    def system(self, name: str):
        try:
            return self.cfg.systems[name]
        except KeyError:
            raise UsageError(f"unknown system {name!r}; available: {sorted(self.cfg.systems)}") from None

    def extra(self, section: str, key: str, default=None):
        return (self.cfg.extras.get(section) or {}).get(key, default)


def _isotope_defaults(ctx: Context, isotope: str):
    alpha = ctx.extra("alpha", f"vb-{isotope}-spin", 1.5)
    fl = ctx.extra("fidelity", f"vb-{isotope}", [1.0, 0.0])
    return alpha, FidelityModel(*fl)


# ------------------------------------------------------------ simulate


def cmd_simulate(ctx: Context) -> int:
    a = ctx.args
    rates = ctx.rates(a.preset)
    ctx.manifest.presets.append(a.preset)
    out = ctx.out
    kind = a.kind
    if kind == "trace":
        alpha = a.alpha if a.alpha is not None else ctx.extra("alpha", "vb-pl-trace", 1.5)
        times = np.arange(0.0, a.t_end + a.step / 2, a.step)
        m = pl_time_trace_protocol(rates, a.power, alpha, a.engine, times, background=a.background)
        ref = float(m.signal[-1])
        path = write_csv(out / "trace.csv", ["t_ns", "signal", "normalized"],
                         zip(m.times, m.signal, m.signal / ref))
        ctx.manifest.add_output(path)
        _write_meta(ctx, "trace.json", m.metadata)
        if a.plot:
            from .plotting import plot_curves
            ctx.manifest.add_output(plot_curves(m.times, {"excited population": m.signal},
                                                out / "trace.png", ylabel="excited population"))
    elif kind == "spin-resolved":
        alpha, fid = _isotope_defaults(ctx, a.isotope)
        if a.alpha is not None:
            alpha = a.alpha
        times = np.arange(0.0, a.t_end + a.step / 2, a.step)
        cols = {}
        for ch in (0, 1, -1):
            cols[ch] = spin_resolved_protocol(rates, a.power, alpha, fid, ch, times, "rate",
                                              background=a.background, isotope=a.isotope)
        path = write_csv(out / "spin_resolved.csv", ["t_ns", "P0", "P+1", "P-1"],
                         zip(times, cols[0].signal, cols[1].signal, cols[-1].signal))
        ctx.manifest.add_output(path)
        _write_meta(ctx, "spin_resolved.json", {ch: cols[ch].metadata for ch in (0, 1, -1)})
        if a.plot:
            from .plotting import plot_curves
            ctx.manifest.add_output(plot_curves(
                times, {"P0": cols[0].signal, "P+1": cols[1].signal, "P-1": cols[-1].signal},
                out / "spin_resolved.png", ylabel="readout"))
    elif kind == "differential":
        irf = None if a.no_irf else IRFModel()
        m = excited_state_differential_protocol(rates, a.pulse_rep, irf=irf)
        path = write_csv(out / "differential.csv", ["t_ns", "signal"], zip(m.times, m.signal))
        ctx.manifest.add_output(path)
        fitres = ft.fit_differential(m.times, m.signal, irf)
        meta = dict(m.metadata, fit=fitres, analytic={"tau0": rates.tau0, "tau1": rates.tau1})
        _write_meta(ctx, "differential.json", meta)
        print(f"tau0 = {fitres['tau0']:.4f} ns   tau1 = {fitres['tau1']:.4f} ns "
              f"(analytic {rates.tau0:.4f}, {rates.tau1:.4f})")
        if a.plot:
            from .plotting import plot_curves
            ctx.manifest.add_output(plot_curves(m.times, {"differential": m.signal},
                                                out / "differential.png"))
    elif kind == "odmr":
        cfg = ctx.system(a.system)
        B = MagneticField.from_bz(a.bz, a.theta)
        freqs = np.linspace(a.fmin, a.fmax, a.points)
        r = rates.replace(gamma_P=a.gamma_p)
        spec = cw_odmr_spectrum(cfg, r, B, freqs, a.omega)
        path = write_csv(out / "odmr.csv", ["f_MHz", "contrast"], zip(spec.freqs, spec.contrast))
        ctx.manifest.add_output(path)
        _write_meta(ctx, "odmr.json", dict(spec.metadata, fwhm_MHz=spec.fwhm,
                                           lines=[l.__dict__ for l in spec.lines]))
        if a.plot:
            from .plotting import plot_curves
            ctx.manifest.add_output(plot_curves(spec.freqs, {"ODMR": spec.contrast}, out / "odmr.png",
                                                xlabel="frequency (MHz)", ylabel="contrast"))
    elif kind == "suite":
        _simulate_suite(ctx, rates)
    return EXIT_OK


def _simulate_suite(ctx: Context, rates) -> None:
    a = ctx.args
    times = np.arange(0.0, a.t_end + a.step / 2, a.step)
    if a.suite == "nv":
        ds = ft.synthetic_nv_suite(rates, a.powers, times, ctx.extra("alpha", "nv", 0.24),
                                   a.noise, a.seed)
    else:
        samples = {iso: _isotope_defaults(ctx, iso) for iso in ("14n", "15n")}
        ds = ft.synthetic_vb_suite(rates, a.powers, times, samples, noise=a.noise, seed=a.seed)
    for d in ds:
        p = ctx.out / f"{d.name}.csv"
        ft.save_dataset(d, p)
        ctx.manifest.add_output(p)
        ctx.manifest.add_output(p.with_suffix(".json"))
    _write_meta(ctx, "truth.json", {"preset": a.preset, "rates": rates.to_dict(), "seed": a.seed,
                                    "noise": a.noise, "powers_mW": list(a.powers)})


def _write_meta(ctx: Context, name: str, meta) -> None:
    path = ctx.out / name
    atomic_write_text(path, json.dumps(meta, indent=2, sort_keys=True, default=_json_default) + "\n")
    ctx.manifest.add_output(path)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if hasattr(o, "to_dict"):
        return o.to_dict()
    return str(o)


# ------------------------------------------------------------ sweep


def cache_key(Bz: float, theta: float) -> str:
    """File name of one grid point, from coordinates quantized to 1 uT / 1 mdeg."""
    return f"pt_B{int(round(Bz * 1000)):+08d}_T{int(round(theta * 1000)):+07d}.json"


def sweep_settings(system, rates, threshold: float = 0.7, background: float = 0.0,
                   t_end_ns: float = 1200.0, dt_ns: float = 2.0, baseline: str = "start",
                   method: str = "auto") -> dict:
    """Everything a cached grid point depends on besides its coordinates."""
    return {"system": system.to_dict(), "rates": rates.to_dict(), "threshold": threshold,
            "background": background, "t_end_ns": t_end_ns, "dt_ns": dt_ns, "baseline": baseline,
            "method": method}


def _sweep_worker(job):
    settings, system, rates, Bz, theta, path = job
    p = sweep_point(system, rates, Bz, theta, settings["threshold"], settings["background"],
                    settings["t_end_ns"], settings["dt_ns"], settings["baseline"],
                    method=settings["method"])
    rec = {"Bz": p.Bz, "theta": p.theta, "timescale": p.timescale, "iz": [float(v) for v in p.iz],
           "pl_ss": p.pl_ss}
    if p.nuclear_pops is not None:
        rec["nuclear_pops"] = [float(v) for v in p.nuclear_pops]
    atomic_write_text(path, json.dumps(rec, sort_keys=True) + "\n")
    return path


def run_sweep(system, rates, Bz_grid, theta_grid, settings: dict, cache_dir, threads: int = 1,
              log=print) -> tuple[list[SweepPoint], int]:
    """Evaluate missing grid points into ``cache_dir``; returns (points, n_computed)."""
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    spath = cache_dir / "settings.json"
    blob = json.dumps(settings, sort_keys=True, indent=1)
    if spath.exists() and spath.read_text() != blob:
        raise UsageError(f"{cache_dir} holds a sweep with different settings")
    atomic_write_text(spath, blob)
    jobs = []
    for th in theta_grid:
        for bz in Bz_grid:
            path = cache_dir / cache_key(bz, th)
            if not path.exists():
                jobs.append((settings, system, rates, float(bz), float(th), path))
    if jobs:
        log(f"computing {len(jobs)} of {len(Bz_grid) * len(theta_grid)} grid points")
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            for path in ex.map(_sweep_worker, jobs):
                log(f"  {path.name}")
    else:
        for job in jobs:
            log(f"  {_sweep_worker(job).name}")
    points = []
    for th in theta_grid:
        for bz in Bz_grid:
            rec = json.loads((cache_dir / cache_key(bz, th)).read_text())
            points.append(SweepPoint(rec["Bz"], rec["theta"], rec["timescale"],
                                     np.array(rec["iz"]), rec["pl_ss"],
                                     np.array(rec["nuclear_pops"]) if "nuclear_pops" in rec else None))
    return points, len(jobs)


def cmd_sweep(ctx: Context) -> int:
    a = ctx.args
    rates = ctx.rates(a.preset).replace(gamma_P=a.gamma_p)
    ctx.manifest.presets.append(a.preset)
    system = ctx.system(a.system)
    if a.scale_nuclei != 1.0:
        system = system.rescale_nuclei(a.scale_nuclei)
    settings = sweep_settings(system, rates, a.threshold, a.background, a.t_end, a.dt,
                              a.baseline, a.method)
    tag = hashlib.sha256(json.dumps(settings, sort_keys=True).encode()).hexdigest()[:12]
    cache_dir = Path(a.cache) if a.cache else ctx.out / "cache" / tag
    points, n_new = run_sweep(system, rates, a.bz, a.theta, settings, cache_dir, a.threads)
    ts, iz = sweep_maps(points, a.bz, a.theta)
    n_nuc = len(points[0].iz) if points else 0
    out = ctx.out
    ctx.manifest.add_output(write_csv(
        out / "sweep_points.csv", ["Bz_mT", "theta_deg", "timescale_ns", "pl_ss"]
        + [f"iz_{i + 1}" for i in range(n_nuc)],
        ([p.Bz, p.theta, p.timescale, p.pl_ss, *map(float, p.iz)] for p in points)))
    header = ["theta_deg"] + [f"{b:g}" for b in a.bz]
    ctx.manifest.add_output(write_csv(out / "timescale_map.csv", header,
                                      ([th, *row] for th, row in zip(a.theta, ts))))
    ctx.manifest.add_output(write_csv(out / "iz_map.csv", header,
                                      ([th, *row] for th, row in zip(a.theta, iz))))
    if a.plot:
        from .plotting import plot_heatmap
        ctx.manifest.add_output(plot_heatmap(a.bz, a.theta, ts, out / "timescale_map.png"))
        ctx.manifest.add_output(plot_heatmap(a.bz, a.theta, iz, out / "iz_map.png",
                                             label="mean <I_z>"))
    print(f"{len(points)} points ({n_new} computed, {len(points) - n_new} from cache) -> {out}")
    return EXIT_OK


# ------------------------------------------------------------ fit


def _load_constraints(path) -> dict:
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read constraints file {path}: {exc}") from None
    allowed = {"tau0_window", "tau1_window", "r_bounds", "gamma_s_bounds", "alpha_bounds",
               "slope_bounds", "fixed"}
    bad = set(d) - allowed
    if bad:
        raise UsageError(f"unknown constraint keys {sorted(bad)}")
    return {k: (tuple(v) if k != "fixed" else dict(v)) for k, v in d.items()}


def cmd_fit(ctx: Context) -> int:
    a = ctx.args
    data_dir = Path(a.data)
    if not data_dir.is_dir():
        raise UsageError(f"{data_dir} is not a directory")
    datasets = ft.load_dataset_dir(data_dir)
    if not datasets:
        raise UsageError(f"no datasets (*.csv) in {data_dir}")
    for f in sorted(data_dir.glob("*.csv")):
        ctx.manifest.add_input(f)
        ctx.manifest.add_input(f.with_suffix(".json"))
    rates = ctx.rates(a.preset)
    ctx.manifest.presets.append(a.preset)
    out = ctx.out
    if all(d.kind == "nv_p0" for d in datasets):
        res = ft.fit_nv(datasets, rates.gamma_s, rates.gamma_ISC, convention=a.nv_convention,
                        n_starts=a.starts, seed=a.seed)
        report = {"model": "nv_effective", **res.__dict__}
        ok = res.converged
        summary = (f"alpha = {res.alpha:.5g} MHz/mW\nGamma_s* = {res.gamma_s_star:.5g} MHz\n"
                   f"r = {res.r:.4f}\nconverged = {res.converged}\n")
    else:
        constraints = _load_constraints(a.constraints) if a.constraints else {}
        if a.constraints:
            ctx.manifest.add_input(a.constraints)
        fixed = {**constraints.pop("fixed", {}), **parse_fix(a.fix)}
        try:
            problem = ft.FitProblem(datasets, base_rates=rates, fixed=fixed, **constraints)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        res = ft.fit(problem, ft.FitSettings(n_starts=a.starts, seed=a.seed))
        report = {"model": "rate_model", **res.to_dict()}
        ok = res.ok
        summary = res.summary() + "\n"
        if a.plot:
            from .plotting import plot_fit
            ctx.manifest.add_output(plot_fit(datasets, ft.fitted_curves(problem, res.x),
                                             out / "fit.png"))
    path = out / "fit_report.json"
    atomic_write_text(path, json.dumps(report, indent=2, sort_keys=True, default=_json_default) + "\n")
    ctx.manifest.add_output(path)
    spath = out / "fit_summary.txt"
    atomic_write_text(spath, summary)
    ctx.manifest.add_output(spath)
    print(summary, end="")
    if not ok:
        print("fit did not converge or is not identifiable; see fit_report.json", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


# ------------------------------------------------------------ presets


def cmd_presets(ctx: Context) -> int:
    a = ctx.args
    if a.action == "list":
        for name in sorted(ctx.cfg.rates):
            print(name)
        for name in sorted(ctx.cfg.systems):
            print(f"{name} (system)")
        return EXIT_OK
    if a.name in ctx.cfg.rates:
        r = ctx.cfg.rates[a.name]
        d = dict(r.to_dict(), tau0_ns=r.tau0, tau1_ns=r.tau1)
    elif a.name in ctx.cfg.systems:
        d = ctx.cfg.systems[a.name].to_dict()
    else:
        raise UsageError(f"unknown preset {a.name!r}; available: {sorted(ctx.cfg.rates)}")
    print(json.dumps(d, indent=2, sort_keys=True))
    return EXIT_OK


# ------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help=f"JSON config (default: ${CONFIG_ENV_VAR} or bundled presets)")
    common.add_argument("--out", default="vbspin_out", help="output directory")
    common.add_argument("--seed", type=int, default=ft.DEFAULT_SEED)
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--plot", action="store_true", help="also write PNG figures")

    p = argparse.ArgumentParser(prog="vbspin", description="Spin-defect optical pumping simulations.")
    sub = p.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run a measurement protocol")
    ssub = sim.add_subparsers(dest="kind", required=True)
    for kind in ("trace", "spin-resolved", "differential", "odmr", "suite"):
        sp_ = ssub.add_parser(kind, parents=[common])
        sp_.add_argument("--preset", default="vb-this-work")
        if kind in ("trace", "spin-resolved", "suite"):
            sp_.add_argument("--t-end", type=float, default=2000.0 if kind == "trace" else 1500.0)
            sp_.add_argument("--step", type=float, default=2.0 if kind == "trace" else 30.0)
        if kind in ("trace", "spin-resolved"):
            sp_.add_argument("--power", type=parse_power, default=10.0)
            sp_.add_argument("--alpha", type=float, default=None, help="MHz per mW")
            sp_.add_argument("--background", type=float, default=0.0)
        if kind == "trace":
            sp_.add_argument("--engine", choices=("rate", "lindblad"), default="rate")
        if kind == "spin-resolved":
            sp_.add_argument("--isotope", choices=("14n", "15n"), default="15n")
        if kind == "differential":
            sp_.add_argument("--pulse-rep", type=float, default=39.0, help="MHz")
            sp_.add_argument("--no-irf", action="store_true")
        if kind == "odmr":
            sp_.add_argument("--system", default="vb-15n")
            sp_.add_argument("--bz", type=float, default=12.0)
            sp_.add_argument("--theta", type=float, default=0.0)
            sp_.add_argument("--gamma-p", type=float, default=20.0)
            sp_.add_argument("--omega", type=float, default=5.0, help="Rabi frequency (MHz)")
            sp_.add_argument("--fmin", type=float, default=2900.0)
            sp_.add_argument("--fmax", type=float, default=3500.0)
            sp_.add_argument("--points", type=int, default=601)
        if kind == "suite":
            sp_.add_argument("--suite", choices=("vb", "nv"), default="vb")
            sp_.add_argument("--powers", type=lambda s: [parse_power(x) for x in s.split(",")],
                             default=[5.0, 10.0, 20.0, 30.0, 40.0])
            sp_.add_argument("--noise", type=float, default=0.01)

    sw = sub.add_parser("sweep", parents=[common], help="field sweep of the polarization timescale")
    sw.add_argument("--system", default="vb-15n")
    sw.add_argument("--preset", default="vb-this-work")
    sw.add_argument("--gamma-p", type=float, default=20.0)
    sw.add_argument("--bz", type=parse_range, default=parse_range("60:150:2"), help="a:b:step or list (mT)")
    sw.add_argument("--theta", type=parse_range, default=parse_range("0,1,2"), help="degrees")
    sw.add_argument("--threshold", type=float, default=0.7)
    sw.add_argument("--background", type=float, default=0.0)
    sw.add_argument("--baseline", choices=("start", "transient"), default="start")
    sw.add_argument("--t-end", type=float, default=1200.0)
    sw.add_argument("--dt", type=float, default=2.0)
    sw.add_argument("--method", choices=("auto", "dense", "krylov", "rk"), default="auto")
    sw.add_argument("--scale-nuclei", type=float, default=1.0,
                    help="multiply every nuclear coupling (negative flips signs)")
    sw.add_argument("--cache", default=None, help="cache directory (default: OUT/cache/<hash>)")

    fi = sub.add_parser("fit", parents=[common], help="global fit of a dataset directory")
    fi.add_argument("data", help="directory of CSV files with JSON sidecars")
    fi.add_argument("--preset", default="vb-this-work", help="start centre (NV: Gamma_s, Gamma_ISC)")
    fi.add_argument("--constraints", default=None, help="JSON file with bounds and fixed values")
    fi.add_argument("--fix", action="append", default=[], metavar="NAME=VALUE")
    fi.add_argument("--starts", type=int, default=8)
    fi.add_argument("--nv-convention", choices=("harmonic", "sum", "literal"), default="harmonic")

    pr = sub.add_parser("presets", parents=[common], help="list or show presets")
    pr.add_argument("action", choices=("list", "show"))
    pr.add_argument("name", nargs="?")
    return p


COMMANDS = {"simulate": cmd_simulate, "sweep": cmd_sweep, "fit": cmd_fit, "presets": cmd_presets}


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command == "presets" and args.action == "show" and not args.name:
        print("presets show: NAME is required", file=sys.stderr)
        return EXIT_USAGE
    t0 = time.perf_counter()
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = Path(args.out)
    manifest = RunManifest(["vbspin", *argv], config_hash(cfg), [])
    if args.config or os.environ.get(CONFIG_ENV_VAR):
        manifest.add_input(args.config or os.environ[CONFIG_ENV_VAR])
    try:
        if args.command != "presets":
            out.mkdir(parents=True, exist_ok=True)
        ctx = Context(args, cfg, out, manifest)
        code = COMMANDS[args.command](ctx)
    except (UsageError, ConfigError, ft.CorruptDataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.command != "presets":
        manifest.wall_time_s = time.perf_counter() - t0
        manifest.write(out)
    return code


if __name__ == "__main__":
    sys.exit(main())
