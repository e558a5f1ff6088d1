"""Measurement sequences: PL time traces, spin-resolved polarization dynamics,
pulsed excited-state differentials, CW-ODMR spectra and the NV effective model.

Every protocol runs on an *engine*: ``rate`` propagates the seven populations,
``lindblad`` propagates the block density matrix of :mod:`vbspin.lindblad`
(real parametrization, dense algebra).  Both expose a generator that is
affine in the pumping rate, ``L(Gamma_P) = L0 + Gamma_P * L1``, which is what
the AOM-ramp integrator relies on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np
import scipy.linalg as sla

from . import rate_model as rm
from .core import (
    EXCITED,
    ElectronicRates,
    MagneticField,
    SpinSystemConfig,
)
from .instrument import (
    READOUT_WINDOW_VB_NS,
    BeamModel,
    FidelityModel,
    Instrument,
    IRFModel,
    convolve_irf,
    convolve_irf_exponentials,
    pi_pulse_matrix,
)
from .lindblad import (
    DENSE_LIMIT,
    BlockState,
    LindbladModel,
    check_state,
    state_from_populations,
)

ENGINES = ("rate", "lindblad")
MAGNUS_STEP_NS = 0.25
PULSE_WIDTH_PS = 5.0
PULSE_REP_MHZ = 39.0


# ------------------------------------------------------------ engines


class RateEngine:
    """Seven-level population engine."""

    name = "rate"

    def __init__(self, rates: ElectronicRates):
        self.rates = rates
        self._w_exc = np.zeros(7)
        self._w_exc[list(EXCITED)] = 1.0

    @property
    def dim(self) -> int:
        return 7

    def generator(self, gamma_P: float) -> np.ndarray:
        return rm.build_rate_matrix(self.rates.replace(gamma_P=gamma_P))

    def state(self, p) -> np.ndarray:
        return np.asarray(p, dtype=float).copy()

    def populations(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float)

    def excited_row(self) -> np.ndarray:
        return self._w_exc

    def pulse(self, transition: int, f: float) -> np.ndarray:
        return pi_pulse_matrix(transition, f)

    def steady_state(self, gamma_P: float) -> np.ndarray:
        return rm.steady_state(self.generator(gamma_P))

    def check(self, x) -> None:
        rm.check_populations(x)


class LindbladEngine:
    """Block density-matrix engine on the real parametrization.

    Defaults to the bare electron (no nuclei) at ``B_z = 12 mT``, ``theta = 0``,
    where it must agree with :class:`RateEngine`.
    """

    name = "lindblad"

    def __init__(self, rates: ElectronicRates, cfg: SpinSystemConfig | None = None,
                 B: MagneticField | None = None, hyperfine: bool = True):
        self.rates = rates
        self.cfg = cfg if cfg is not None else SpinSystemConfig()
        self.B = B if B is not None else MagneticField.from_bz(12.0)
        self.hyperfine = hyperfine
        probe = self._model(0.0)
        if probe.reduced_dim > DENSE_LIMIT:
            raise ValueError(
                f"reduced dimension {probe.reduced_dim} exceeds {DENSE_LIMIT}; "
                "use lindblad.pl_time_trace for large systems"
            )
        self._probe = probe
        self.N = probe.N
        d = probe.d
        self._w_exc = np.zeros(probe.reduced_dim)
        self._w_exc[d * d + np.arange(d) * (d + 1)] = 1.0

    def _model(self, gamma_P: float) -> LindbladModel:
        return LindbladModel(self.cfg, self.rates.replace(gamma_P=gamma_P), self.B, self.hyperfine)

    @property
    def dim(self) -> int:
        return self._probe.reduced_dim

    def generator(self, gamma_P: float) -> np.ndarray:
        return _lindblad_generator(self, float(gamma_P))

    def state(self, p) -> np.ndarray:
        return self._probe.to_real(state_from_populations(p, self.N))

    def block_state(self, x) -> BlockState:
        return self._probe.from_real(x)

    def populations(self, x) -> np.ndarray:
        return self.block_state(x).level_populations()

    def excited_row(self) -> np.ndarray:
        return self._w_exc

    def pulse(self, transition: int, f: float) -> np.ndarray:
        """Mixture of identity and the g0 <-> g(transition) swap, on the real vector."""
        if not 0.0 <= f <= 1.0:
            raise ValueError(f"pulse fidelity must lie in [0, 1], got {f}")
        N, d = self.N, self._probe.d
        perm = np.eye(3)
        j = 0 if int(transition) == +1 else 2
        perm[[1, j]] = perm[[j, 1]]
        X = np.kron(perm, np.eye(N))
        n = self.dim
        M = np.eye(n, dtype=complex)
        M[: d * d, : d * d] = (1.0 - f) * np.eye(d * d) + f * np.kron(X, X)
        T, P = self._probe._real_maps
        return np.real(P @ (M @ T.toarray()))

    def steady_state(self, gamma_P: float) -> np.ndarray:
        return self._probe.to_real(self._model(gamma_P).steady_state())

    def check(self, x) -> None:
        check_state(self.block_state(x))


def _lindblad_generator(engine: LindbladEngine, gamma_P: float) -> np.ndarray:
    cache = engine.__dict__.setdefault("_gen_cache", {})
    if gamma_P not in cache:
        cache[gamma_P] = engine._model(gamma_P)._dense
    return cache[gamma_P]


Engine = Union[RateEngine, LindbladEngine]


def make_engine(engine: str | Engine, rates: ElectronicRates, cfg: SpinSystemConfig | None = None,
                B: MagneticField | None = None, hyperfine: bool = True) -> Engine:
    if not isinstance(engine, str):
        return engine
    if engine == "rate":
        return RateEngine(rates)
    if engine == "lindblad":
        return LindbladEngine(rates, cfg, B, hyperfine)
    raise ValueError(f"unknown engine {engine!r}; choose from {ENGINES}")


# ------------------------------------------------------------ propagation helpers


class _Propagator:
    """Caches exponentials for one engine and one pumping rate (times in ns)."""

    def __init__(self, engine: Engine, gamma_P: float):
        self.engine = engine
        self.gamma_P = gamma_P
        self.L = engine.generator(gamma_P) * 1e-3  # per ns
        self._cache: dict[float, np.ndarray] = {}

    def expm(self, dt: float) -> np.ndarray:
        key = round(float(dt), 9)
        if key not in self._cache:
            self._cache[key] = sla.expm(self.L * dt)
        return self._cache[key]

    def window_average(self, window: float) -> np.ndarray:
        """(1/T) * integral_0^T exp(L s) ds, from one augmented exponential."""
        n = self.L.shape[0]
        aug = np.zeros((2 * n, 2 * n))
        aug[:n, :n] = self.L * window
        aug[:n, n:] = np.eye(n)
        return sla.expm(aug)[:n, n:]


def _magnus_ramp(engine: Engine, x, gamma_P: float, t0: float, t1: float, ramp_ns: float,
                 step_ns: float = MAGNUS_STEP_NS):
    """Propagate through a linear power ramp with the 4th-order Magnus integrator."""
    L0 = engine.generator(0.0) * 1e-3
    L1 = engine.generator(1.0) * 1e-3 - L0
    n = max(1, int(math.ceil((t1 - t0) / step_ns - 1e-9)))
    h = (t1 - t0) / n
    c = math.sqrt(3.0) / 6.0
    for i in range(n):
        ta = t0 + i * h
        s1 = min((ta + (0.5 - c) * h) / ramp_ns, 1.0)
        s2 = min((ta + (0.5 + c) * h) / ramp_ns, 1.0)
        A1 = L0 + gamma_P * s1 * L1
        A2 = L0 + gamma_P * s2 * L1
        omega = 0.5 * h * (A1 + A2) + (math.sqrt(3.0) / 12.0) * h * h * (A2 @ A1 - A1 @ A2)
        x = sla.expm(omega) @ x
    return x


def propagate_with_ramp(engine: Engine, x0, gamma_P: float, times_ns, ramp_ns: float,
                        step_ns: float = MAGNUS_STEP_NS) -> np.ndarray:
    """States at ``times_ns`` with the laser rising linearly over ``ramp_ns``."""
    times = np.asarray(times_ns, dtype=float)
    if np.any(np.diff(times) < 0) or times[0] < 0:
        raise ValueError("times must be non-negative and sorted")
    prop = _Propagator(engine, gamma_P)
    x = np.asarray(x0, dtype=float)
    out = np.empty((times.size, x.size))
    t = 0.0
    for i, ti in enumerate(times):
        if ti > t and t < ramp_ns:
            te = min(ti, ramp_ns)
            x = _magnus_ramp(engine, x, gamma_P, t, te, ramp_ns, step_ns)
            t = te
        if ti > t:
            x = prop.expm(ti - t) @ x
            t = ti
        out[i] = x
    return out


# ------------------------------------------------------------ pulse sequences


@dataclass(frozen=True)
class Laser:
    power: float  # mW
    duration: float  # ns; math.inf means "until steady state"


@dataclass(frozen=True)
class PiPulse:
    transition: int
    fidelity: Union[float, FidelityModel] = 1.0


@dataclass(frozen=True)
class Wait:
    duration: float  # ns


@dataclass(frozen=True)
class Readout:
    window: float = READOUT_WINDOW_VB_NS  # ns


Segment = Union[Laser, PiPulse, Wait, Readout]


@dataclass(frozen=True)
class PulseSequence:
    segments: tuple

    def __post_init__(self):
        segs = tuple(self.segments)
        object.__setattr__(self, "segments", segs)
        n_read = sum(isinstance(s, Readout) for s in segs)
        if n_read != 1 or not isinstance(segs[-1], Readout):
            raise ValueError("a pulse sequence needs exactly one Readout, placed last")
        for s in segs:
            if isinstance(s, PiPulse) and int(s.transition) not in (-1, 1):
                raise ValueError(f"pi pulse transition must be +1 or -1, got {s.transition}")
            for name in ("duration", "window", "power"):
                v = getattr(s, name, None)
                if v is not None and not v > 0:
                    raise ValueError(f"{type(s).__name__}.{name} must be > 0, got {v}")

    @property
    def readout(self) -> Readout:
        return self.segments[-1]

    def describe(self) -> list[str]:
        return [repr(s) for s in self.segments]


class SequenceRunner:
    """Evaluates pulse sequences on one engine with cached propagators.

    ``scale`` multiplies every laser rate (the beam-sector intensity).
    """

    def __init__(self, engine: Engine, alpha: float, scale: float = 1.0, check: bool = False):
        if not alpha > 0:
            raise ValueError("alpha must be > 0")
        self.engine = engine
        self.alpha = alpha
        self.scale = scale
        self.check = check
        self._props: dict[float, _Propagator] = {}
        self._ss: dict[float, np.ndarray] = {}
        self._readout: dict[tuple[float, float], np.ndarray] = {}

    def rate(self, power: float) -> float:
        return self.alpha * power * self.scale

    def prop(self, gamma_P: float) -> _Propagator:
        if gamma_P not in self._props:
            self._props[gamma_P] = _Propagator(self.engine, gamma_P)
        return self._props[gamma_P]

    def steady(self, gamma_P: float) -> np.ndarray:
        if gamma_P not in self._ss:
            self._ss[gamma_P] = self.engine.steady_state(gamma_P)
        return self._ss[gamma_P]

    def readout_row(self, gamma_P: float, window: float) -> np.ndarray:
        key = (gamma_P, window)
        if key not in self._readout:
            self._readout[key] = self.engine.excited_row() @ self.prop(gamma_P).window_average(window)
        return self._readout[key]

    def run(self, seq: PulseSequence, x0=None) -> float:
        x = x0
        gp = 0.0
        for seg in seq.segments:
            if isinstance(seg, Laser):
                gp = self.rate(seg.power)
                if math.isinf(seg.duration):
                    x = self.steady(gp)
                else:
                    x = self.prop(gp).expm(seg.duration) @ self._need(x)
            elif isinstance(seg, Wait):
                gp = 0.0
                x = self.prop(0.0).expm(seg.duration) @ self._need(x)
            elif isinstance(seg, PiPulse):
                f = seg.fidelity
                if callable(f):
                    # fidelity is set by the nominal (beam-centre) rate
                    f = float(f(gp / self.scale if self.scale else gp))
                x = self.engine.pulse(seg.transition, f) @ self._need(x)
            if self.check and x is not None:
                self.engine.check(x)
        # the readout continues the last laser segment
        return float(self.readout_row(gp, seq.readout.window) @ self._need(x))

    def _need(self, x):
        if x is None:
            raise ValueError("sequence must start from a steady-state laser segment or be given x0")
        return x


# ------------------------------------------------------------ results


@dataclass
class SimulatedMeasurement:
    times: np.ndarray  # ns (or MHz for spectra)
    signal: np.ndarray
    metadata: dict = field(default_factory=dict)

    REQUIRED = ("protocol", "engine")

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.signal = np.asarray(self.signal, dtype=float)
        if self.times.shape != self.signal.shape:
            raise ValueError("times and signal must have the same shape")
        if not np.all(np.isfinite(self.signal)):
            raise ValueError("simulated signal has non-finite values")
        missing = [k for k in self.REQUIRED if k not in self.metadata]
        if missing:
            raise ValueError(f"metadata missing {missing}")


def _beam_sum(beam: BeamModel, fn: Callable[[float], np.ndarray]) -> np.ndarray:
    out = None
    for w, frac in zip(beam.sector_weights, beam.sector_fractions):
        if frac == 0.0:
            continue
        y = frac * np.asarray(fn(w), dtype=float)
        out = y if out is None else out + y
    return out


def _meta(protocol, engine, rates, **kw) -> dict:
    m = {"protocol": protocol, "engine": engine.name, "rates": rates.to_dict()}
    m.update(kw)
    return m


# ------------------------------------------------------------ protocols


def default_trace_times(t_end_ns: float = 2000.0, step_ns: float = 2.0) -> np.ndarray:
    return np.arange(0.0, t_end_ns + step_ns / 2, step_ns)


def pl_time_trace_protocol(rates: ElectronicRates, power: float, alpha: float,
                           engine: str | Engine = "rate", times_ns=None,
                           instrument: Instrument = Instrument(), background: float = 0.0,
                           isotope: str = "", magnus_step_ns: float = MAGNUS_STEP_NS,
                           check: bool = False) -> SimulatedMeasurement:
    """Excited-population trace after switching the laser on.

    Starts from the laser-off steady state (the unpolarized ground triplet),
    ramps the laser over the AOM rise time and averages over beam sectors.
    """
    if not alpha > 0:
        raise ValueError("alpha must be > 0")
    if not power > 0:
        raise ValueError("power must be > 0")
    eng = make_engine(engine, rates)
    times = default_trace_times() if times_ns is None else np.asarray(times_ns, dtype=float)
    x0 = eng.state(rm.unpolarized_ground())
    row = eng.excited_row()
    gp0 = alpha * power

    def sector(w):
        X = propagate_with_ramp(eng, x0, w * gp0, times, instrument.aom_ramp_ns, magnus_step_ns)
        if check:
            for x in X:
                eng.check(x)
        return X @ row

    sig = _beam_sum(instrument.beam, sector) + background
    return SimulatedMeasurement(times, sig, _meta(
        "pl_trace", eng, rates, power_mW=power, alpha=alpha, isotope=isotope,
        background=background, gamma_P=gp0, aom_ramp_ns=instrument.aom_ramp_ns,
        beam=list(instrument.beam.sector_weights)))


def spin_resolved_sequence(power: float, t_ns: float, readout_target: int,
                           fidelity, window: float = READOUT_WINDOW_VB_NS) -> PulseSequence:
    """polarize -> pi(0<->-1) -> laser for t -> [pi to the target] -> readout."""
    segs: list = [Laser(power, math.inf), PiPulse(-1, fidelity)]
    if t_ns > 0:
        segs.append(Laser(power, t_ns))
    if readout_target != 0:
        segs.append(PiPulse(readout_target, fidelity))
    segs.append(Readout(window))
    return PulseSequence(tuple(segs))


def spin_resolved_protocol(rates: ElectronicRates, power: float, alpha: float,
                           fidelity_model: Union[FidelityModel, float], readout_target: int,
                           t_grid, engine: str | Engine = "rate",
                           instrument: Instrument = Instrument(), background: float = 0.0,
                           isotope: str = "", check: bool = False) -> SimulatedMeasurement:
    """Effective population P_target(t) of the spin-resolved sequence.

    The signal is the raw readout (excited population averaged over the
    readout window), not a normalized probability.
    """
    if readout_target not in (0, 1, -1):
        raise ValueError(f"readout_target must be 0, +1 or -1, got {readout_target}")
    if not alpha > 0 or not power > 0:
        raise ValueError("alpha and power must be > 0")
    eng = make_engine(engine, rates)
    t_grid = np.asarray(t_grid, dtype=float)
    if np.any(t_grid < 0):
        raise ValueError("t_grid must be >= 0")
    fid = fidelity_model if callable(fidelity_model) else FidelityModel(float(fidelity_model))
    window = instrument.readout_window_ns

    def sector(w):
        runner = SequenceRunner(eng, alpha, scale=w, check=check)
        return np.array([runner.run(spin_resolved_sequence(power, t, readout_target, fid, window))
                         for t in t_grid])

    sig = _beam_sum(instrument.beam, sector) + background
    return SimulatedMeasurement(t_grid, sig, _meta(
        "spin_resolved", eng, rates, power_mW=power, alpha=alpha, isotope=isotope,
        channel=int(readout_target), fidelity=float(fid(alpha * power)),
        readout_window_ns=window, background=background,
        sequence=spin_resolved_sequence(power, 1.0, readout_target, fid, window).describe()))


def default_differential_times(step_ns: float = 0.005, t_min: float = -1.0,
                               t_max: float = 12.0) -> np.ndarray:
    n = int(round((t_max - t_min) / step_ns))
    return t_min + step_ns * np.arange(n + 1)


def _exact_irf(L, row, dx, t_check, y_check, times, irf: IRFModel):
    """IRF-convolved ``row . exp(L t) dx`` from the eigen-expansion of ``L``.

    Returns None when the expansion does not reproduce the propagated values
    (defective or badly conditioned generator).
    """
    lam, V = np.linalg.eig(L)
    try:
        amp = (row @ V) * np.linalg.solve(V, dx)
    except np.linalg.LinAlgError:
        return None
    keep = np.abs(amp) > 0
    lam, amp = lam[keep], amp[keep]
    scale = max(np.abs(y_check).max(), 1e-300)
    recon = (np.exp(np.outer(t_check, lam)) @ amp).real
    if np.abs(recon - y_check).max() > 1e-9 * scale:
        return None
    return convolve_irf_exponentials(times, amp, -lam, irf)


def excited_state_differential_protocol(rates: ElectronicRates, pulse_rep: float = PULSE_REP_MHZ,
                                        engine: str | Engine = "rate", times_ns=None,
                                        irf: IRFModel | None = IRFModel(),
                                        gamma_P: float = 20.0, pi_fidelity: float = 1.0,
                                        check: bool = False) -> SimulatedMeasurement:
    """PL decay after a short pulse from |g0> minus the same from |g-1>.

    The 5 ps pulse moves a fraction ``1 - exp(-Gamma_P * 5 ps)`` of the ground
    population to the excited state; the result is reported per unit excited
    fraction, so it starts at zero and follows the bi-exponential
    ``exp(-t/tau0) - exp(-t/tau1)`` before IRF convolution.
    """
    if not pulse_rep > 0:
        raise ValueError("pulse_rep must be > 0")
    period = 1e3 / pulse_rep
    if period < 10.0 * max(rates.tau0, rates.tau1):
        raise ValueError(f"pulse period {period:.3g} ns is not long compared with the excited lifetimes")
    eng = make_engine(engine, rates)
    times = default_differential_times() if times_ns is None else np.asarray(times_ns, dtype=float)
    exc = -math.expm1(-gamma_P * PULSE_WIDTH_PS * 1e-6)
    # prepared ground states and their excited images (the ground remainder
    # emits nothing with the laser off, so it drops out of the PL)
    p0 = rm.basis_state("e0")
    pm = pi_pulse_matrix(-1, pi_fidelity) @ rm.basis_state("g0")
    pm = np.array([0, 0, 0, pm[0], pm[1], pm[2], 0.0])
    x_a, x_b = eng.state(p0), eng.state(pm)
    prop = _Propagator(eng, 0.0)
    row = eng.excited_row()
    diff = np.zeros_like(times)
    pos = times >= 0
    tp = times[pos]
    xa, xb, t_prev = x_a, x_b, 0.0
    vals = []
    for t in tp:
        U = prop.expm(t - t_prev)
        xa, xb = U @ xa, U @ xb
        if check:
            eng.check(xa)
            eng.check(xb)
        t_prev = t
        vals.append(row @ (xa - xb))
    diff[pos] = vals
    if irf is None:
        sig = diff
    else:
        sig = _exact_irf(prop.L, row, x_a - x_b, tp, diff[pos], times, irf)
        if sig is None:
            sig = convolve_irf(times, diff, irf)
    return SimulatedMeasurement(times, sig, _meta(
        "differential", eng, rates, pulse_rep_MHz=pulse_rep, excited_fraction=exc,
        irf_fwhm_ps=None if irf is None else irf.fwhm, pi_fidelity=pi_fidelity))


# ------------------------------------------------------------ CW-ODMR


@dataclass
class OdmrLine:
    transition: int
    frequency: float  # MHz
    weight: float
    m_sum: float


@dataclass
class OdmrSpectrum:
    freqs: np.ndarray  # MHz
    contrast: np.ndarray
    lines: list[OdmrLine]
    fwhm: float
    metadata: dict = field(default_factory=dict)

    def line_weights(self, transition: int) -> dict[float, float]:
        return {ln.m_sum: ln.weight for ln in self.lines if ln.transition == transition}


def odmr_fwhm(rates: ElectronicRates, omega: float, power_broadening: float = 1.0 / math.pi) -> float:
    """Lorentzian FWHM (MHz): dephasing width plus a term linear in the drive."""
    return rates.gamma_2 / math.pi + power_broadening * omega


def nuclear_config_populations(cfg: SpinSystemConfig, rates: ElectronicRates, B: MagneticField,
                               mode: str = "steady") -> np.ndarray:
    """Populations of the nuclear product states (|m_1 ... m_n>)."""
    N = int(np.prod(cfg.nuclear_dims, dtype=int))
    if mode == "uniform" or not cfg.nuclei:
        return np.full(N, 1.0 / N)
    if mode != "steady":
        raise ValueError(f"unknown nuclear population mode {mode!r}")
    model = LindbladModel(cfg, rates, B)
    return model.nuclear_populations(model.steady_state())


def _m_values(cfg: SpinSystemConfig) -> np.ndarray:
    """(N, n_nuclei) array of m_I for every nuclear product state."""
    grids = [n.spin - np.arange(n.dim) for n in cfg.nuclei]
    if not grids:
        return np.zeros((1, 0))
    mesh = np.meshgrid(*grids, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def odmr_lines(cfg: SpinSystemConfig, B: MagneticField, nuclear_pops) -> list[OdmrLine]:
    """Secular hyperfine lines ``D +- (gamma_e B_z + sum A_zz m)``, merged by frequency."""
    m = _m_values(cfg)
    azz = np.array([n.A_gs[2, 2] for n in cfg.nuclei])
    shift = m @ azz if azz.size else np.zeros(1)
    msum = m.sum(axis=1) if m.shape[1] else np.zeros(1)
    pops = np.asarray(nuclear_pops, dtype=float)
    lines = []
    for tr in (-1, +1):
        f = cfg.D_gs + tr * (cfg.gamma_e * B.Bz + shift)
        keys = np.round(f, 9)
        for k in np.unique(keys):
            sel = keys == k
            lines.append(OdmrLine(tr, float(f[sel][0]), float(pops[sel].sum()), float(msum[sel][0])))
    return lines


def cw_odmr_spectrum(cfg: SpinSystemConfig, rates: ElectronicRates, B: MagneticField, freqs,
                     omega: float, nuclear: str | np.ndarray = "steady",
                     power_broadening: float = 1.0 / math.pi) -> OdmrSpectrum:
    """CW-ODMR contrast ``1 - PL_on/PL_off`` against microwave frequency (MHz).

    Each hyperfine line drives the rate model with mixing
    ``omega * L(f - f_line)`` on its electronic transition, L a unit-height
    Lorentzian; the line contributions are weighted by the nuclear populations.
    """
    if omega < 0:
        raise ValueError("omega must be >= 0")
    if rates.gamma_P <= 0:
        raise ValueError("gamma_P must be > 0")
    freqs = np.asarray(freqs, dtype=float)
    pops = (nuclear_config_populations(cfg, rates, B, nuclear) if isinstance(nuclear, str)
            else np.asarray(nuclear, dtype=float))
    if abs(pops.sum() - 1.0) > 1e-9:
        raise ValueError("nuclear populations must sum to 1")
    lines = odmr_lines(cfg, B, pops)
    w = odmr_fwhm(rates, omega, power_broadening)
    off = rm.excited_population(rm.steady_state(rm.build_rate_matrix(rates)))
    contrast = np.zeros_like(freqs)
    for ln in lines:
        if ln.weight == 0.0:
            continue
        lor = 1.0 / (1.0 + (2.0 * (freqs - ln.frequency) / w) ** 2)
        c_line = np.empty_like(freqs)
        for i, L in enumerate(lor):
            om = omega * L
            mix = (0.0, om) if ln.transition == -1 else (om, 0.0)
            on = rm.excited_population(rm.steady_state(rm.build_rate_matrix(rates, mix)))
            c_line[i] = 1.0 - on / off
        contrast += ln.weight * c_line
    return OdmrSpectrum(freqs, contrast, lines, w, {
        "protocol": "odmr", "engine": "rate", "omega": omega, "B_z": B.Bz, "theta": B.theta,
        "nuclear": nuclear if isinstance(nuclear, str) else "given", "rates": rates.to_dict()})


def peak_asymmetry(spec: OdmrSpectrum, transition: int = -1) -> float:
    """Weight of lines with positive nuclear m-sum minus weight with negative m-sum."""
    w = spec.line_weights(transition)
    return float(sum(v for m, v in w.items() if m > 0) - sum(v for m, v in w.items() if m < 0))


# ------------------------------------------------------------ NV effective model

NV_GAMMA_CONVENTIONS = ("sum", "literal", "harmonic")


def nv_effective_rate(alpha: float, gamma_s_star: float, P, convention: str = "harmonic"):
    """Initialization rate (MHz) for the NV effective model.

    ``sum``: alpha*P + Gs*.  ``literal``: (alpha*P + Gs*)^-1 taken numerically
    as a rate.  ``harmonic``: saturation form (1/(alpha*P) + 1/Gs*)^-1.
    """
    aP = alpha * np.asarray(P, dtype=float)
    if convention == "sum":
        return aP + gamma_s_star
    if convention == "literal":
        return 1.0 / (aP + gamma_s_star)
    if convention == "harmonic":
        return aP * gamma_s_star / (aP + gamma_s_star)
    raise ValueError(f"unknown convention {convention!r}; choose from {NV_GAMMA_CONVENTIONS}")


def nv_effective_model(alpha: float, gamma_s_star: float, P: float, t, pl_ss: float = 1.0,
                       beam: BeamModel = BeamModel(), convention: str = "harmonic") -> np.ndarray:
    """``PL_ss * (1 - exp(-Gamma_eff t))`` averaged over beam sectors (t in ns)."""
    if not (alpha > 0 and gamma_s_star > 0 and P > 0):
        raise ValueError("alpha, gamma_s_star and P must be > 0")
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    for w, frac in zip(beam.sector_weights, beam.sector_fractions):
        g = nv_effective_rate(alpha, gamma_s_star, w * P, convention)
        out += frac * -np.expm1(-g * t * 1e-3)
    return pl_ss * out


__all__: Sequence[str] = [
    "ENGINES",
    "RateEngine",
    "LindbladEngine",
    "make_engine",
    "propagate_with_ramp",
    "Laser",
    "PiPulse",
    "Wait",
    "Readout",
    "PulseSequence",
    "SequenceRunner",
    "SimulatedMeasurement",
    "pl_time_trace_protocol",
    "spin_resolved_sequence",
    "spin_resolved_protocol",
    "excited_state_differential_protocol",
    "OdmrLine",
    "OdmrSpectrum",
    "odmr_fwhm",
    "odmr_lines",
    "nuclear_config_populations",
    "cw_odmr_spectrum",
    "peak_asymmetry",
    "nv_effective_rate",
    "nv_effective_model",
]
