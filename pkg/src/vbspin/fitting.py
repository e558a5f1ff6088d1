"""Global least-squares estimation of the electronic rates from PL traces,
spin-resolved datasets and excited-state differentials, plus the NV
effective-model fit, fidelity lines and the profile bound on r.

Constraint handling: the optimizer works in ``(tau0, tau1, r)`` instead of
``(Gamma_E, Gamma_ISC, r)``, so the lifetime windows are plain box bounds.
Linear nuisances (one amplitude per sample, one background per dataset) are
eliminated by bounded linear least squares at every evaluation.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.linalg as sla
from scipy.optimize import least_squares, lsq_linear
from scipy.stats import chi2

from . import rate_model as rm
from .core import EXCITED, ElectronicRates
from .instrument import (
    READOUT_WINDOW_NV_NS,
    BeamModel,
    FidelityModel,
    Instrument,
    IRFModel,
    convolve_irf_exponentials,
    pi_pulse_matrix,
)
from .protocols import (
    excited_state_differential_protocol,
    nv_effective_model,
    pl_time_trace_protocol,
    spin_resolved_protocol,
)

KINDS = ("pl_trace", "spin_resolved", "differential", "nv_p0")
TAU0_WINDOW = (1.09, 1.27)  # ns
TAU1_WINDOW = (0.42, 0.52)  # ns
R_BOUNDS = (0.0, 0.1)
DEFAULT_SEED = 20240


class CorruptDataError(ValueError):
    def __init__(self, path, line: int, msg: str):
        super().__init__(f"{path}:{line}: {msg}")
        self.path = str(path)
        self.line = line


class ResidualEvaluationError(RuntimeError):
    def __init__(self, dataset: str, cause: Exception):
        super().__init__(f"forward model failed for dataset {dataset!r}: {cause}")
        self.dataset = dataset
        self.cause = cause


class RankDeficientError(ValueError):
    pass


# ------------------------------------------------------------ datasets


@dataclass
class Dataset:
    kind: str
    times: np.ndarray  # ns
    signal: np.ndarray
    power: float = 1.0  # mW
    isotope: str = ""
    channel: int | None = None
    sample: str = ""
    weights: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}; choose from {KINDS}")
        self.times = np.asarray(self.times, dtype=float)
        self.signal = np.asarray(self.signal, dtype=float)
        if self.times.shape != self.signal.shape or self.times.ndim != 1:
            raise ValueError("times and signal must be 1-d arrays of equal length")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")
        if not np.all(np.isfinite(self.signal)):
            raise ValueError("signal must be finite")
        if not self.power > 0:
            raise ValueError("power must be > 0")
        if self.kind == "spin_resolved" and self.channel not in (0, 1, -1):
            raise ValueError("spin_resolved datasets need channel 0, +1 or -1")
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=float)
            if self.weights.shape != self.signal.shape or np.any(self.weights < 0):
                raise ValueError("weights must be non-negative and match the signal")
        if not self.sample:
            self.sample = self.isotope or "default"
        if not self.name:
            ch = "" if self.channel is None else f"_P{self.channel:+d}".replace("+0", "0")
            self.name = f"{self.kind}_{self.sample}_{self.power:g}mW{ch}"

    @property
    def w(self) -> np.ndarray:
        return np.ones_like(self.signal) if self.weights is None else self.weights

    def sidecar(self) -> dict:
        d = {"kind": self.kind, "isotope": self.isotope, "power_mW": self.power,
             "sample": self.sample, "name": self.name}
        if self.channel is not None:
            d["channel"] = self.channel
        return d


def save_dataset(ds: Dataset, csv_path) -> None:
    csv_path = Path(csv_path)
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_ns", "signal"] + (["weight"] if ds.weights is not None else []))
        for i in range(ds.times.size):
            row = [repr(float(ds.times[i])), repr(float(ds.signal[i]))]
            if ds.weights is not None:
                row.append(repr(float(ds.weights[i])))
            w.writerow(row)
    csv_path.with_suffix(".json").write_text(json.dumps(ds.sidecar(), indent=2, sort_keys=True) + "\n")


def load_dataset(csv_path) -> Dataset:
    """Read ``<name>.csv`` (t_ns, signal[, weight]) and its ``<name>.json`` sidecar."""
    csv_path = Path(csv_path)
    side = csv_path.with_suffix(".json")
    if not side.exists():
        raise CorruptDataError(side, 0, "missing JSON sidecar")
    try:
        meta = json.loads(side.read_text())
    except json.JSONDecodeError as exc:
        raise CorruptDataError(side, exc.lineno, f"invalid JSON: {exc.msg}") from None
    for key in ("kind", "power_mW"):
        if key not in meta:
            raise CorruptDataError(side, 0, f"sidecar lacks {key!r}")
    t, y, wts = [], [], []
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise CorruptDataError(csv_path, 1, "empty file")
        header = [h.strip() for h in header]
        if header[:2] != ["t_ns", "signal"] or len(header) > 3 or (len(header) == 3 and header[2] != "weight"):
            raise CorruptDataError(csv_path, 1, f"expected header t_ns,signal[,weight], got {','.join(header)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise CorruptDataError(csv_path, lineno, f"expected {len(header)} fields, got {len(row)}")
            try:
                vals = [float(c) for c in row]
            except ValueError:
                raise CorruptDataError(csv_path, lineno, f"non-numeric value in {row!r}") from None
            if not all(math.isfinite(v) for v in vals):
                raise CorruptDataError(csv_path, lineno, "non-finite value")
            t.append(vals[0])
            y.append(vals[1])
            if len(vals) == 3:
                wts.append(vals[2])
    if not t:
        raise CorruptDataError(csv_path, 2, "no data rows")
    if np.any(np.diff(t) <= 0):
        bad = int(np.argmax(np.diff(t) <= 0)) + 3
        raise CorruptDataError(csv_path, bad, "times must be strictly increasing")
    try:
        return Dataset(kind=meta["kind"], times=np.array(t), signal=np.array(y),
                       power=float(meta["power_mW"]), isotope=meta.get("isotope", ""),
                       channel=meta.get("channel"), sample=meta.get("sample", ""),
                       weights=np.array(wts) if wts else None,
                       name=meta.get("name", csv_path.stem))
    except ValueError as exc:
        raise CorruptDataError(side, 0, str(exc)) from None


def shot_noise_weights(signal, floor: float | None = None) -> np.ndarray:
    """Residual weights 1/sqrt(signal) for counting-noise data.

    ``floor`` (default: 1e-3 of the largest signal) keeps near-zero samples
    from dominating.
    """
    y = np.asarray(signal, dtype=float)
    top = float(np.abs(y).max()) if y.size else 0.0
    if top == 0.0:
        raise ValueError("shot-noise weights need a non-zero signal")
    lo = 1e-3 * top if floor is None else float(floor)
    if not lo > 0:
        raise ValueError("floor must be > 0")
    return 1.0 / np.sqrt(np.maximum(np.abs(y), lo))


def load_dataset_dir(path) -> list[Dataset]:
    files = sorted(Path(path).glob("*.csv"))
    return [load_dataset(f) for f in files]


# ------------------------------------------------------------ reparameterization


def rates_from_lifetimes(tau0: float, tau1: float, r: float) -> tuple[float, float]:
    """(Gamma_E, Gamma_ISC) in MHz from lifetimes in ns and the branching ratio r."""
    if not 0.0 <= r < 1.0:
        raise ValueError("r must lie in [0, 1)")
    a, b = 1e3 / tau0, 1e3 / tau1
    gisc = (b - a) / (1.0 - r)
    return b - gisc, gisc


def _lifetime_jacobian(tau0: float, tau1: float, r: float) -> np.ndarray:
    """d(Gamma_E, Gamma_ISC) / d(tau0, tau1, r)."""
    a, b = 1e3 / tau0, 1e3 / tau1
    dI = np.array([a / tau0 / (1 - r), -b / tau1 / (1 - r), (b - a) / (1 - r) ** 2])
    dE = np.array([0.0, -b / tau1, 0.0]) - dI
    return np.vstack([dE, dI])


def lifetimes_from_rates(gamma_E: float, gamma_ISC: float, r: float) -> tuple[float, float]:
    return 1e3 / (gamma_E + r * gamma_ISC), 1e3 / (gamma_E + gamma_ISC)


# ------------------------------------------------------------ fast forward models


def _eig_propagate(L: np.ndarray, x0: np.ndarray, t_us: np.ndarray) -> np.ndarray:
    """exp(L t) x0 for many t via the eigendecomposition of a small generator."""
    lam, V = np.linalg.eig(L)
    c = np.linalg.solve(V, x0.astype(complex))
    return np.real((np.exp(np.outer(t_us, lam)) * c) @ V.T)


def _window_average(L: np.ndarray, window_ns: float) -> np.ndarray:
    n = L.shape[0]
    aug = np.zeros((2 * n, 2 * n))
    aug[:n, :n] = L * window_ns * 1e-3
    aug[:n, n:] = np.eye(n)
    return sla.expm(aug)[:n, n:]


_W_EXC = np.zeros(7)
_W_EXC[list(EXCITED)] = 1.0


def fast_spin_resolved(rates: ElectronicRates, power: float, alpha: float, fidelity: FidelityModel,
                       channels: Sequence[int], t_ns, beam: BeamModel, window_ns: float) -> dict[int, np.ndarray]:
    """All spin-resolved channels at one power (same result as the protocol)."""
    t_us = np.asarray(t_ns, dtype=float) * 1e-3
    gp0 = alpha * power
    f = float(fidelity(gp0))
    P1 = pi_pulse_matrix(-1, f)
    out = {c: np.zeros(t_us.size) for c in channels}
    for w, frac in zip(beam.sector_weights, beam.sector_fractions):
        if frac == 0.0:
            continue
        M = rm.build_rate_matrix(rates.replace(gamma_P=w * gp0))
        x = P1 @ rm.steady_state(M)
        X = _eig_propagate(M, x, t_us)
        row = _W_EXC @ _window_average(M, window_ns)
        for c in channels:
            rc = row if c == 0 else row @ pi_pulse_matrix(c, f)
            out[c] += frac * (X @ rc)
    return out


def fast_pl_trace(rates: ElectronicRates, power: float, alpha: float, t_ns,
                  instrument: Instrument) -> np.ndarray:
    return pl_time_trace_protocol(rates, power, alpha, "rate", t_ns, instrument).signal


def differential_model(rates: ElectronicRates, t_ns, irf: IRFModel | None = IRFModel()) -> np.ndarray:
    """Excited-state differential (|e0> minus |e-1> start) from the full rate matrix.

    Same physics as the differential protocol with a perfect pi pulse,
    including T1 mixing, evaluated from the eigen-expansion of the
    laser-off generator.
    """
    t = np.asarray(t_ns, dtype=float)
    L = rm.build_rate_matrix(rates.replace(gamma_P=0.0)) * 1e-3  # per ns
    lam, V = np.linalg.eig(L)
    dx = rm.basis_state("e0") - rm.basis_state("e-1")
    amp = (_W_EXC @ V) * np.linalg.solve(V, dx)
    keep = np.abs(amp) > 0
    lam, amp = lam[keep], amp[keep]
    if irf is not None:
        return convolve_irf_exponentials(t, amp, -lam, irf)
    y = np.zeros_like(t)
    pos = t >= 0
    y[pos] = (np.exp(np.outer(t[pos], lam)) @ amp).real
    return y


# ------------------------------------------------------------ problem definition


GLOBAL_NAMES = ("tau0", "tau1", "r", "gamma_s", "k")
SAMPLE_NAMES = ("alpha", "f0", "slope")


@dataclass
class FitProblem:
    """Datasets plus parameter layout, bounds and fixed values.

    Global parameters: tau0, tau1 (ns), r, gamma_s (MHz), k.  Per sample:
    alpha (MHz/mW) and, when the sample has spin-resolved data, the fidelity
    line f0 + slope * Gamma_P.  gamma_1 and gamma_2 come from ``base_rates``.
    """

    datasets: list[Dataset]
    base_rates: ElectronicRates = field(default_factory=lambda: ElectronicRates(
        gamma_E=849.0, gamma_ISC=1286.0, gamma_s=22.3, k=0.21, gamma_1=1 / 15, gamma_2=1 / 0.062))
    instrument: Instrument = field(default_factory=Instrument)
    fixed: dict = field(default_factory=dict)
    tau0_window: tuple[float, float] = TAU0_WINDOW
    tau1_window: tuple[float, float] = TAU1_WINDOW
    r_bounds: tuple[float, float] = R_BOUNDS
    gamma_s_bounds: tuple[float, float] = (0.5, 500.0)
    alpha_bounds: tuple[float, float] = (0.01, 50.0)
    slope_bounds: tuple[float, float] = (-0.05, 0.05)
    irf: IRFModel = field(default_factory=IRFModel)

    def __post_init__(self):
        for lo, hi in (self.tau0_window, self.tau1_window, self.r_bounds):
            if not lo < hi:
                raise ValueError("constraint intervals must be non-empty")
        unknown = set(self.fixed) - set(self.all_names)
        if unknown:
            raise ValueError(f"cannot fix unknown parameters {sorted(unknown)}")

    @property
    def samples(self) -> list[str]:
        out = []
        for d in self.datasets:
            if d.kind in ("pl_trace", "spin_resolved") and d.sample not in out:
                out.append(d.sample)
        return out

    def _sample_has_fidelity(self, s: str) -> bool:
        return any(d.sample == s and d.kind == "spin_resolved" for d in self.datasets)

    @property
    def all_names(self) -> list[str]:
        names = list(GLOBAL_NAMES)
        for s in self.samples:
            names.append(f"alpha[{s}]")
            if self._sample_has_fidelity(s):
                names += [f"f0[{s}]", f"slope[{s}]"]
        return names

    @property
    def free_names(self) -> list[str]:
        return [n for n in self.all_names if n not in self.fixed]

    def bounds_of(self, name: str) -> tuple[float, float]:
        base = name.split("[")[0]
        return {
            "tau0": self.tau0_window, "tau1": self.tau1_window, "r": self.r_bounds,
            "gamma_s": self.gamma_s_bounds, "k": (0.0, 1.0), "alpha": self.alpha_bounds,
            "f0": (0.0, 1.0), "slope": self.slope_bounds,
        }[base]

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        b = [self.bounds_of(n) for n in self.free_names]
        return np.array([x[0] for x in b]), np.array([x[1] for x in b])

    def full(self, x: Sequence[float]) -> dict:
        vals = dict(self.fixed)
        vals.update(zip(self.free_names, map(float, x)))
        return vals

    def rates_for(self, p: dict) -> ElectronicRates:
        gE, gI = rates_from_lifetimes(p["tau0"], p["tau1"], p["r"])
        return self.base_rates.replace(gamma_E=gE, gamma_ISC=gI, gamma_s=p["gamma_s"],
                                       r=p["r"], k=p["k"], gamma_P=0.0)

    def initial_from_rates(self, rates: ElectronicRates, alpha: dict | float = 1.5,
                           fidelity: dict | tuple = (0.6, -0.003)) -> np.ndarray:
        t0, t1 = rates.tau0, rates.tau1
        g = {"tau0": t0, "tau1": t1, "r": rates.r, "gamma_s": rates.gamma_s, "k": rates.k}
        for s in self.samples:
            g[f"alpha[{s}]"] = alpha[s] if isinstance(alpha, dict) else alpha
            fl = fidelity[s] if isinstance(fidelity, dict) else fidelity
            g[f"f0[{s}]"], g[f"slope[{s}]"] = fl
        lo, hi = self.bounds()
        return np.clip([g[n] for n in self.free_names], lo, hi)


# ------------------------------------------------------------ residuals


def _forward(problem: FitProblem, p: dict, rates: ElectronicRates) -> list[np.ndarray]:
    """Unscaled model curves, one per dataset, in dataset order."""
    inst = problem.instrument
    out: list[np.ndarray | None] = [None] * len(problem.datasets)
    groups: dict[tuple, list[int]] = {}
    for i, d in enumerate(problem.datasets):
        if d.kind == "spin_resolved":
            groups.setdefault((d.sample, d.power, d.times.tobytes()), []).append(i)
    for (s, power, _), idx in groups.items():
        d0 = problem.datasets[idx[0]]
        try:
            fid = FidelityModel(p[f"f0[{s}]"], p[f"slope[{s}]"])
            res = fast_spin_resolved(rates, power, p[f"alpha[{s}]"], fid,
                                     sorted({problem.datasets[i].channel for i in idx}),
                                     d0.times, inst.beam, inst.readout_window_ns)
        except Exception as exc:  # noqa: BLE001 - re-raised with the dataset tag
            raise ResidualEvaluationError(d0.name, exc) from exc
        for i in idx:
            out[i] = res[problem.datasets[i].channel]
    for i, d in enumerate(problem.datasets):
        if out[i] is not None:
            continue
        try:
            if d.kind == "pl_trace":
                out[i] = fast_pl_trace(rates, d.power, p[f"alpha[{d.sample}]"], d.times, inst)
            elif d.kind == "differential":
                out[i] = differential_model(rates, d.times, problem.irf)
            else:
                raise ValueError(f"dataset kind {d.kind!r} is fitted with fit_nv")
        except ResidualEvaluationError:
            raise
        except Exception as exc:  # noqa: BLE001
            raise ResidualEvaluationError(d.name, exc) from exc
        if not np.all(np.isfinite(out[i])):
            raise ResidualEvaluationError(d.name, FloatingPointError("non-finite model values"))
    return out


def _linear_nuisances(problem: FitProblem, models: list[np.ndarray]):
    """Per-group amplitude (>= 0) and per-dataset background (>= 0).

    Datasets of one sample share an amplitude; each differential dataset has
    its own.  Returns (amplitude per dataset, background per dataset).
    """
    ds = problem.datasets
    groups: dict[str, list[int]] = {}
    for i, d in enumerate(ds):
        key = d.sample if d.kind in ("pl_trace", "spin_resolved") else f"#{i}"
        groups.setdefault(key, []).append(i)
    amp = np.zeros(len(ds))
    bg = np.zeros(len(ds))
    for idx in groups.values():
        n_rows = sum(ds[i].signal.size for i in idx)
        A = np.zeros((n_rows, 1 + len(idx)))
        y = np.zeros(n_rows)
        row = 0
        for j, i in enumerate(idx):
            d = ds[i]
            n = d.signal.size
            w = d.w
            A[row:row + n, 0] = w * models[i]
            A[row:row + n, 1 + j] = w
            y[row:row + n] = w * d.signal
            row += n
        scale = np.maximum(np.abs(A).max(axis=0), 1e-300)
        sol = lsq_linear(A / scale, y, bounds=(0.0, np.inf), method="bvls")
        coef = sol.x / scale
        for j, i in enumerate(idx):
            amp[i] = coef[0]
            bg[i] = coef[1 + j]
    return amp, bg


def residuals(problem: FitProblem, x: Sequence[float]) -> np.ndarray:
    """Concatenated weighted residuals (model - data) across all datasets."""
    if not problem.datasets:
        return np.zeros(0)
    lo, hi = problem.bounds()
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("parameters must be finite")
    if np.any(x < lo - 1e-12) or np.any(x > hi + 1e-12):
        raise ValueError("parameters outside bounds")
    p = problem.full(x)
    rates = problem.rates_for(p)
    models = _forward(problem, p, rates)
    amp, bg = _linear_nuisances(problem, models)
    return np.concatenate([d.w * (amp[i] * models[i] + bg[i] - d.signal)
                           for i, d in enumerate(problem.datasets)])


def nuisances(problem: FitProblem, x: Sequence[float]) -> dict[str, dict[str, float]]:
    p = problem.full(x)
    models = _forward(problem, p, problem.rates_for(p))
    amp, bg = _linear_nuisances(problem, models)
    return {d.name: {"amplitude": float(amp[i]), "background": float(bg[i])}
            for i, d in enumerate(problem.datasets)}


def fitted_curves(problem: FitProblem, x: Sequence[float]) -> list[np.ndarray]:
    """Model curves including the fitted amplitude and background."""
    p = problem.full(x)
    models = _forward(problem, p, problem.rates_for(p))
    amp, bg = _linear_nuisances(problem, models)
    return [amp[i] * m + bg[i] for i, m in enumerate(models)]


# ------------------------------------------------------------ fit


@dataclass
class FitSettings:
    n_starts: int = 8
    seed: int = DEFAULT_SEED
    max_nfev: int = 200
    ftol: float = 1e-10
    xtol: float = 1e-10
    gtol: float = 1e-10
    include_initial: bool = True
    cond_limit: float = 1e10


@dataclass
class FitResult:
    names: list[str]
    x: np.ndarray
    params: dict
    derived: dict
    intervals: dict
    cost: float
    residual_norm: float
    initial_norm: float
    converged: bool
    identifiable: bool
    message: str
    nfev: int
    start_costs: list[float]
    n_data: int
    jac_cond: float
    nuisances: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.converged and self.identifiable

    def to_dict(self) -> dict:
        return {
            "parameters": self.params,
            "derived": self.derived,
            "intervals_95": self.intervals,
            "residual_norm": self.residual_norm,
            "initial_residual_norm": self.initial_norm,
            "diagnostics": {
                "converged": self.converged,
                "identifiable": self.identifiable,
                "message": self.message,
                "nfev": self.nfev,
                "start_costs": self.start_costs,
                "n_data": self.n_data,
                "jacobian_condition": self.jac_cond,
            },
            "nuisances": self.nuisances,
        }

    def summary(self) -> str:
        lines = ["parameter        estimate        95% interval"]
        for n in list(self.params) + list(self.derived):
            v = self.params.get(n, self.derived.get(n))
            lo, hi = self.intervals.get(n, (float("nan"), float("nan")))
            lines.append(f"{n:<16} {v:>12.6g}    [{lo:.6g}, {hi:.6g}]")
        lines.append(f"residual norm    {self.residual_norm:.6g} (initial {self.initial_norm:.6g})")
        lines.append(f"converged        {self.converged}")
        lines.append(f"identifiable     {self.identifiable} (cond {self.jac_cond:.3g})")
        lines.append(f"message          {self.message}")
        return "\n".join(lines)


def multistart_points(problem: FitProblem, center: ElectronicRates, n: int, seed: int) -> np.ndarray:
    """Random starts: rates log-uniform within x/3 of ``center``, r and k uniform."""
    rng = np.random.default_rng(seed)
    lo, hi = problem.bounds()
    pts = []
    for _ in range(n):
        g = {}
        gE = center.gamma_E * 3.0 ** rng.uniform(-1, 1)
        gI = center.gamma_ISC * 3.0 ** rng.uniform(-1, 1)
        r = rng.uniform(*problem.r_bounds)
        t0, t1 = lifetimes_from_rates(gE, gI, r)
        g["tau0"], g["tau1"], g["r"] = t0, t1, r
        g["gamma_s"] = center.gamma_s * 3.0 ** rng.uniform(-1, 1)
        g["k"] = rng.uniform(0.0, 1.0)
        for s in problem.samples:
            g[f"alpha[{s}]"] = 1.5 * 3.0 ** rng.uniform(-1, 1)
            g[f"f0[{s}]"] = rng.uniform(0.3, 0.9)
            g[f"slope[{s}]"] = rng.uniform(-0.006, 0.0)
        pts.append(np.clip([g[nm] for nm in problem.free_names], lo, hi))
    return np.array(pts)


def _intervals(problem: FitProblem, x, jac, cost, n_data, level=0.95):
    names = problem.free_names
    n = len(names)
    dof = max(n_data - n, 1)
    s2 = 2.0 * cost / dof
    JtJ = jac.T @ jac
    try:
        sv = np.linalg.svd(jac, compute_uv=False)
        cond = float(sv[0] / sv[-1]) if sv[-1] > 0 else float("inf")
    except np.linalg.LinAlgError:
        cond = float("inf")
    cov = s2 * np.linalg.pinv(JtJ)
    z = float(np.sqrt(chi2.ppf(level, 1)))
    iv = {}
    for i, nm in enumerate(names):
        se = math.sqrt(max(cov[i, i], 0.0))
        iv[nm] = (float(x[i] - z * se), float(x[i] + z * se))
    # derived rates by the delta method
    p = problem.full(x)
    jd = _lifetime_jacobian(p["tau0"], p["tau1"], p["r"])
    grads = {}
    for j, key in enumerate(("gamma_E", "gamma_ISC")):
        g = np.zeros(n)
        for i, nm in enumerate(names):
            if nm in ("tau0", "tau1", "r"):
                g[i] = jd[j, ("tau0", "tau1", "r").index(nm)]
        grads[key] = g
    gE, gI = rates_from_lifetimes(p["tau0"], p["tau1"], p["r"])
    for key, val in (("gamma_E", gE), ("gamma_ISC", gI)):
        se = math.sqrt(max(float(grads[key] @ cov @ grads[key]), 0.0))
        iv[key] = (val - z * se, val + z * se)
    return iv, cond


def fit(problem: FitProblem, settings: FitSettings = FitSettings(), x0=None,
        start_center: ElectronicRates | None = None) -> FitResult:
    """Multi-start bounded trust-region fit (``least_squares``, method ``trf``)."""
    if not problem.datasets:
        raise ValueError("fit needs at least one dataset")
    lo, hi = problem.bounds()
    center = start_center or problem.base_rates
    starts = []
    if x0 is not None:
        x0 = np.asarray(x0, dtype=float)
        if np.any(x0 < lo) or np.any(x0 > hi):
            raise ValueError("initial guess outside bounds")
        starts.append(x0)
    elif settings.include_initial:
        starts.append(problem.initial_from_rates(center))
    n_random = max(settings.n_starts - len(starts), 0)
    if n_random:
        starts.extend(multistart_points(problem, center, n_random, settings.seed))

    fun = lambda x: residuals(problem, x)  # noqa: E731
    best = None
    start_costs = []
    for s in starts:
        try:
            sol = least_squares(fun, s, bounds=(lo, hi), method="trf", x_scale="jac",
                                ftol=settings.ftol, xtol=settings.xtol, gtol=settings.gtol,
                                max_nfev=settings.max_nfev)
        except ResidualEvaluationError:
            start_costs.append(float("nan"))
            continue
        start_costs.append(float(sol.cost))
        if best is None or sol.cost < best[0].cost:
            best = (sol, s)
    if best is None:
        raise RuntimeError("every start failed to evaluate")
    sol, s_best = best
    init_best = float(np.linalg.norm(fun(s_best)))
    n_data = sol.fun.size
    iv, cond = _intervals(problem, sol.x, sol.jac, sol.cost, n_data)
    p = problem.full(sol.x)
    gE, gI = rates_from_lifetimes(p["tau0"], p["tau1"], p["r"])
    identifiable = bool(np.isfinite(cond) and cond < settings.cond_limit and n_data > len(sol.x))
    return FitResult(
        names=problem.free_names, x=sol.x, params=p,
        derived={"gamma_E": gE, "gamma_ISC": gI}, intervals=iv, cost=float(sol.cost),
        residual_norm=float(np.linalg.norm(sol.fun)), initial_norm=init_best,
        converged=bool(sol.success), identifiable=identifiable, message=str(sol.message),
        nfev=int(sol.nfev), start_costs=start_costs, n_data=n_data, jac_cond=cond,
        nuisances=nuisances(problem, sol.x))


def refit_fixed(problem: FitProblem, fitted: FitResult, fixed: dict,
                settings: FitSettings = FitSettings()) -> FitResult:
    """Refit with extra parameters held, warm-started from ``fitted``."""
    sub = FitProblem(**{**problem.__dict__, "fixed": {**problem.fixed, **fixed}})
    x0 = np.array([fitted.params[n] for n in sub.free_names])
    lo, hi = sub.bounds()
    x0 = np.clip(x0, lo, hi)
    return fit(sub, FitSettings(**{**settings.__dict__, "n_starts": 1}), x0=x0)


# ------------------------------------------------------------ profile bound on r


@dataclass
class ProfileResult:
    r_grid: np.ndarray
    delta: np.ndarray  # (SSR(r) - SSR_min) / s^2
    threshold: float
    upper: float
    lower: float
    open_upper: bool
    open_lower: bool


def profile_bound_r(problem: FitProblem, fitted: FitResult, confidence: float = 0.95,
                    grid=None, threshold: float | None = None,
                    settings: FitSettings = FitSettings()) -> ProfileResult:
    """Profile-likelihood interval for r with all other parameters re-optimized.

    ``delta(r) = (SSR(r) - SSR_min) / s^2`` with ``s^2 = SSR_min / (n - p)``;
    the bound is the largest r with ``delta <= threshold`` (chi-square quantile
    with one degree of freedom by default), interpolated linearly.
    """
    if not fitted.converged:
        raise ValueError("profile_bound_r needs a converged fit")
    if "r" in problem.fixed:
        raise ValueError("r is fixed in this problem")
    lo_r, hi_r = problem.r_bounds
    grid = np.linspace(lo_r, hi_r, 11) if grid is None else np.asarray(grid, dtype=float)
    thr = float(chi2.ppf(confidence, 1)) if threshold is None else float(threshold)
    ssr_min = 2.0 * fitted.cost
    s2 = max(ssr_min / max(fitted.n_data - len(fitted.x), 1), 1e-300)
    r_hat = fitted.params["r"]
    deltas = np.full(grid.size, np.nan)
    # walk outwards from the estimate so each refit is warm-started
    order_up = [i for i in np.argsort(grid) if grid[i] >= r_hat]
    order_dn = [i for i in np.argsort(grid)[::-1] if grid[i] < r_hat]
    for order in (order_up, order_dn):
        prev = fitted
        for i in order:
            if math.isinf(thr) and order is order_up:
                deltas[i] = 0.0
                continue
            res = refit_fixed(problem, prev, {"r": float(grid[i])}, settings)
            deltas[i] = max(2.0 * res.cost - ssr_min, 0.0) / s2
            prev = FitResult(**{**res.__dict__, "params": {**res.params, "r": float(grid[i])}})
            if deltas[i] > thr:
                break
    upper, open_up = _crossing(grid, deltas, r_hat, thr, +1, hi_r)
    lower, open_lo = _crossing(grid, deltas, r_hat, thr, -1, lo_r)
    return ProfileResult(grid, deltas, thr, upper, lower, open_up, open_lo)


def _crossing(grid, deltas, r_hat, thr, direction, edge):
    idx = np.argsort(grid)
    g, d = grid[idx], deltas[idx]
    if direction > 0:
        sel = g >= r_hat
    else:
        sel = g <= r_hat
        g, d = g[::-1], d[::-1]
        sel = sel[::-1]
    g, d = g[sel], d[sel]
    prev_r, prev_d = r_hat, 0.0
    for r, dv in zip(g, d):
        if np.isnan(dv):
            break
        if dv > thr:
            frac = (thr - prev_d) / (dv - prev_d) if dv != prev_d else 0.0
            return float(prev_r + frac * (r - prev_r)), False
        prev_r, prev_d = r, dv
    return float(edge), True


# ------------------------------------------------------------ fidelity line


@dataclass
class FidelityLine:
    f0: float
    slope: float
    se_f0: float
    se_slope: float

    @property
    def model(self) -> FidelityModel:
        return FidelityModel(self.f0, self.slope)


def fidelity_line_fit(gamma_P, fidelities) -> FidelityLine:
    """Ordinary least-squares line ``f = f0 + slope * Gamma_P``."""
    x = np.asarray(gamma_P, dtype=float)
    y = np.asarray(fidelities, dtype=float)
    if x.size != y.size or x.size < 2:
        raise ValueError("need at least two (Gamma_P, fidelity) pairs")
    A = np.column_stack([np.ones_like(x), x])
    if np.linalg.matrix_rank(A) < 2:
        raise RankDeficientError("fidelity line is rank deficient (all powers identical)")
    coef, res, _, _ = np.linalg.lstsq(A, y, rcond=None)
    dof = x.size - 2
    if dof > 0:
        s2 = float(np.sum((A @ coef - y) ** 2)) / dof
        cov = s2 * np.linalg.inv(A.T @ A)
        se = np.sqrt(np.diag(cov))
    else:
        se = np.array([0.0, 0.0])
    return FidelityLine(float(coef[0]), float(coef[1]), float(se[0]), float(se[1]))


# ------------------------------------------------------------ lifetimes


def fit_exponential(t_ns, y) -> tuple[float, float]:
    """(tau, amplitude) of ``A exp(-t/tau)`` by nonlinear least squares."""
    t = np.asarray(t_ns, dtype=float)
    y = np.asarray(y, dtype=float)
    pos = y > 0
    slope = np.polyfit(t[pos], np.log(y[pos]), 1)[0] if pos.sum() > 1 else -1.0
    tau0 = -1.0 / slope if slope < 0 else 1.0
    sol = least_squares(lambda p: p[1] * np.exp(-t / p[0]) - y, [tau0, max(y.max(), 1e-12)],
                        bounds=([1e-6, 0.0], [np.inf, np.inf]), x_scale="jac",
                        ftol=1e-14, xtol=1e-14, gtol=1e-14)
    return float(sol.x[0]), float(sol.x[1])


def fit_differential(t_ns, signal, irf: IRFModel | None = IRFModel(),
                     guess: tuple[float, float] = (1.2, 0.5)) -> dict:
    """Fit ``A (e^{-t/tau0} - e^{-t/tau1}) (x) IRF + b``; returns tau0, tau1, A, b."""
    t = np.asarray(t_ns, dtype=float)
    y = np.asarray(signal, dtype=float)

    def shape(ta, tb):
        if irf is not None:
            return convolve_irf_exponentials(t, [1.0, -1.0], [1.0 / ta, 1.0 / tb], irf)
        z = np.zeros_like(t)
        pos = t >= 0
        z[pos] = np.exp(-t[pos] / ta) - np.exp(-t[pos] / tb)
        return z

    def res(p):
        z = shape(p[0], p[1])
        X = np.column_stack([z, np.ones_like(z)])
        c, *_ = np.linalg.lstsq(X, y, rcond=None)
        return X @ c - y

    sol = least_squares(res, list(guess), bounds=([0.05, 0.01], [20.0, 20.0]), x_scale="jac",
                        ftol=1e-14, xtol=1e-14, gtol=1e-14)
    ta, tb = sorted(sol.x, reverse=True)
    z = shape(ta, tb)
    X = np.column_stack([z, np.ones_like(z)])
    c, *_ = np.linalg.lstsq(X, y, rcond=None)
    return {"tau0": float(ta), "tau1": float(tb), "amplitude": float(c[0]), "background": float(c[1]),
            "residual_norm": float(np.linalg.norm(X @ c - y))}


# ------------------------------------------------------------ NV effective model


@dataclass
class NVFitResult:
    alpha: float
    gamma_s_star: float
    r: float
    amplitudes: list[float]
    residual_norm: float
    converged: bool
    convention: str


def fit_nv(datasets: Sequence[Dataset], gamma_s: float, gamma_ISC: float,
           beam: BeamModel = BeamModel.uniform(), convention: str = "harmonic",
           n_starts: int = 8, seed: int = DEFAULT_SEED) -> NVFitResult:
    """Global fit of baseline-subtracted NV P0 traces to the effective model.

    alpha and Gamma_s* are shared; each power has its own amplitude PL_ss.
    ``r = (Gamma_s* - Gamma_s) / Gamma_ISC``.
    """
    ds = [d for d in datasets if d.kind == "nv_p0"]
    if not ds:
        raise ValueError("fit_nv needs nv_p0 datasets")

    def res(th):
        a, g = th
        out = []
        for d in ds:
            m = nv_effective_model(a, g, d.power, d.times, 1.0, beam, convention)
            wm = d.w * m
            amp = max(float(wm @ (d.w * d.signal)) / max(float(wm @ wm), 1e-300), 0.0)
            out.append(d.w * (amp * m - d.signal))
        return np.concatenate(out)

    rng = np.random.default_rng(seed)
    starts = [np.array([0.24, 8.0])] + [
        np.array([0.24 * 10 ** rng.uniform(-1, 1), 8.0 * 10 ** rng.uniform(-1, 1)])
        for _ in range(max(n_starts - 1, 0))
    ]
    best = None
    for s in starts:
        sol = least_squares(res, s, bounds=([1e-4, 1e-3], [100.0, 1000.0]), x_scale="jac",
                            ftol=1e-12, xtol=1e-12, gtol=1e-12)
        if best is None or sol.cost < best.cost:
            best = sol
    a, g = best.x
    amps = []
    for d in ds:
        m = nv_effective_model(a, g, d.power, d.times, 1.0, beam, convention)
        amps.append(float(m @ d.signal / (m @ m)))
    return NVFitResult(float(a), float(g), float((g - gamma_s) / gamma_ISC), amps,
                       float(np.linalg.norm(best.fun)), bool(best.success), convention)


# ------------------------------------------------------------ synthetic suites


def synthetic_vb_suite(rates: ElectronicRates, powers: Sequence[float], t_grid,
                       samples: dict, channels: Sequence[int] = (0, 1, -1),
                       noise: float = 0.01, seed: int = DEFAULT_SEED,
                       instrument: Instrument = Instrument(), background: float = 0.0,
                       differential: bool = True) -> list[Dataset]:
    """Spin-resolved datasets for each sample, power and channel.

    ``samples`` maps a sample name to ``(alpha, FidelityModel)``.  Noise is
    Gaussian with standard deviation ``noise * max|signal|`` per dataset and
    the weights are set to its inverse.  With ``differential`` one
    excited-state differential per sample is added, which is what pins the
    two lifetimes.
    """
    rng = np.random.default_rng(seed)
    out = []

    def noisy(y):
        sd = noise * np.abs(y).max()
        return y + sd * rng.standard_normal(y.size), np.full(y.size, 1.0 / sd) if sd > 0 else None

    for s, (alpha, fid) in samples.items():
        for P in powers:
            for ch in channels:
                y = spin_resolved_protocol(rates, P, alpha, fid, ch, t_grid, "rate", instrument,
                                           background * rates_scale(rates, alpha * P)).signal
                y, w = noisy(y)
                out.append(Dataset("spin_resolved", t_grid, y, P, isotope=s, channel=ch, sample=s,
                                   weights=w))
        if differential:
            m = excited_state_differential_protocol(rates, irf=instrument.irf)
            y, w = noisy(m.signal)
            out.append(Dataset("differential", m.times, y, 1.0, isotope=s, sample=s, weights=w,
                               name=f"differential_{s}"))
    return out


def rates_scale(rates: ElectronicRates, gamma_P: float) -> float:
    """Steady-state excited population; used to size synthetic backgrounds."""
    return float(rm.excited_population(rm.steady_state(rm.build_rate_matrix(rates.replace(gamma_P=gamma_P)))))


def synthetic_nv_suite(rates: ElectronicRates, powers: Sequence[float], t_grid, alpha: float = 0.24,
                       noise: float = 0.01, seed: int = DEFAULT_SEED,
                       beam: BeamModel = BeamModel.uniform()) -> list[Dataset]:
    """Baseline-subtracted P0 traces from the full rate model (500 ns readout)."""
    rng = np.random.default_rng(seed)
    inst = Instrument(beam=beam, readout_window_ns=READOUT_WINDOW_NV_NS)
    out = []
    for P in powers:
        y = spin_resolved_protocol(rates, P, alpha, 1.0, 0, t_grid, "rate", inst).signal
        y = y - y[0]
        y = y + noise * np.abs(y).max() * rng.standard_normal(y.size)
        out.append(Dataset("nv_p0", t_grid, y, P, isotope="nv", sample="nv"))
    return out


__all__: Sequence[str] = [
    "KINDS",
    "Dataset",
    "FitProblem",
    "FitSettings",
    "FitResult",
    "ProfileResult",
    "FidelityLine",
    "NVFitResult",
    "CorruptDataError",
    "ResidualEvaluationError",
    "RankDeficientError",
    "save_dataset",
    "load_dataset",
    "load_dataset_dir",
    "shot_noise_weights",
    "rates_from_lifetimes",
    "lifetimes_from_rates",
    "fast_spin_resolved",
    "differential_model",
    "residuals",
    "nuisances",
    "fitted_curves",
    "fit",
    "refit_fixed",
    "multistart_points",
    "profile_bound_r",
    "fidelity_line_fit",
    "fit_exponential",
    "fit_differential",
    "fit_nv",
    "synthetic_vb_suite",
    "synthetic_nv_suite",
]
