"""Non-intrinsic measurement effects: beam profile, IRF, AOM ramp, pi-pulse
fidelity, background fluorescence and readout-window averaging."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.ndimage import gaussian_filter1d
from scipy.special import erfc, erfcx

from .core import G_0, G_M1, G_P1

SECTOR_INTENSITIES = (0.923, 0.485, 0.134, 0.0194, 0.00148)
IRF_FWHM_PS = 140.0
AOM_RAMP_NS = 40.0
READOUT_WINDOW_VB_NS = 125.0
READOUT_WINDOW_NV_NS = 500.0


@dataclass(frozen=True)
class BeamModel:
    """Gaussian beam discretized into intensity sectors.

    ``sector_fractions`` are the averaging weights of each sector. The default
    (equal fifths) is an assumption; :meth:`equal_width_rings` gives the
    area weights of rings of equal radial width, which is the geometry the
    default intensities correspond to.
    """

    sector_weights: tuple[float, ...] = SECTOR_INTENSITIES
    sector_fractions: tuple[float, ...] = (0.2, 0.2, 0.2, 0.2, 0.2)

    def __post_init__(self):
        if len(self.sector_weights) != len(self.sector_fractions):
            raise ValueError("sector weights and fractions must have equal length")
        if abs(sum(self.sector_fractions) - 1.0) > 1e-12:
            raise ValueError("sector fractions must sum to 1")
        if min(self.sector_fractions) < 0 or min(self.sector_weights) < 0:
            raise ValueError("sector weights and fractions must be >= 0")

    @classmethod
    def uniform(cls) -> "BeamModel":
        """Flat-top illumination (a single sector at full intensity)."""
        return cls((1.0,), (1.0,))

    @classmethod
    def equal_width_rings(cls) -> "BeamModel":
        n = len(SECTOR_INTENSITIES)
        fr = tuple((2 * i + 1) / n**2 for i in range(n))
        return cls(SECTOR_INTENSITIES, fr)

    def sector_rates(self, gamma_P0: float) -> np.ndarray:
        return np.asarray(self.sector_weights) * gamma_P0

    @property
    def mean_weight(self) -> float:
        return float(np.dot(self.sector_weights, self.sector_fractions))


def beam_average(model: BeamModel, simulate: Callable[[float], np.ndarray],
                 gamma_P0: float):
    """Fraction-weighted average of ``simulate(w * gamma_P0)`` over sectors."""
    out = None
    for w, f in zip(model.sector_weights, model.sector_fractions):
        if f == 0.0:
            continue
        y = f * np.asarray(simulate(w * gamma_P0), dtype=float)
        out = y if out is None else out + y
    return out


@dataclass(frozen=True)
class IRFModel:
    fwhm: float = IRF_FWHM_PS  # ps

    def __post_init__(self):
        if not self.fwhm > 0:
            raise ValueError("IRF fwhm must be > 0")

    @property
    def sigma_ns(self) -> float:
        return self.fwhm * 1e-3 / (2.0 * math.sqrt(2.0 * math.log(2.0)))


def convolve_irf(t, trace, model: IRFModel = IRFModel()) -> np.ndarray:
    """Convolve a uniformly sampled trace (t in ns) with the Gaussian IRF.

    Edges are handled by constant extension; the kernel sums to one.
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(trace, dtype=float)
    if t.size < 2:
        return y.copy()
    dt = np.diff(t)
    if np.ptp(dt) > 1e-9 * dt.mean():
        raise ValueError("convolve_irf requires a uniform time grid")
    step = dt.mean()
    if step > model.fwhm * 1e-3 / 4:
        raise ValueError(
            f"sampling step {step * 1e3:.3g} ps too coarse for IRF fwhm {model.fwhm} ps"
        )
    return gaussian_filter1d(y, model.sigma_ns / step, mode="nearest", truncate=8.0)


def convolve_irf_exponentials(t, amplitudes, rates, model: IRFModel = IRFModel()) -> np.ndarray:
    """Exact Gaussian-IRF convolution of ``sum_i a_i exp(-k_i t)`` for t >= 0 (zero before).

    ``rates`` are in 1/ns and may be complex (with conjugate partners). Any
    time grid is accepted since nothing is sampled.
    """
    t = np.asarray(t, dtype=float)
    a = np.asarray(amplitudes)
    lam = -np.asarray(rates)
    if a.shape != lam.shape:
        raise ValueError("amplitudes and rates must have the same shape")
    sig = model.sigma_ns
    out = np.zeros(t.shape, dtype=complex)
    for ai, li in zip(a.ravel(), lam.ravel()):
        # 0.5 exp(l t + l^2 s^2 / 2) erfc(z),  z = -(t + l s^2) / (s sqrt 2)
        z = -(t + li * sig**2) / (sig * math.sqrt(2.0))
        big = z.real > 0
        term = np.empty(t.shape, dtype=complex)
        term[big] = 0.5 * erfcx(z[big]) * np.exp(-t[big] ** 2 / (2 * sig**2))
        zs = z[~big]
        ts = t[~big]
        term[~big] = 0.5 * np.exp(li * ts + li**2 * sig**2 / 2) * erfc(zs)
        out += ai * term
    return out.real


def aom_ramp(t, ramp: float = AOM_RAMP_NS):
    """Laser power multiplier ``min(t/ramp, 1)`` for t >= 0 (ns)."""
    return np.clip(np.asarray(t, dtype=float) / ramp, 0.0, 1.0)


_TRANSITIONS = {-1: (G_0, G_M1), +1: (G_0, G_P1)}


def apply_pi_pulse(p, transition: int, f: float) -> np.ndarray:
    """Swap a fraction ``f`` of population between g0 and g(transition)."""
    if not 0.0 <= f <= 1.0:
        raise ValueError(f"pulse fidelity must lie in [0, 1], got {f}")
    a, b = _TRANSITIONS[int(transition)]
    p = np.array(p, dtype=float)
    pa, pb = p[..., a].copy(), p[..., b].copy()
    p[..., a] = (1.0 - f) * pa + f * pb
    p[..., b] = (1.0 - f) * pb + f * pa
    return p


def pi_pulse_matrix(transition: int, f: float) -> np.ndarray:
    """7x7 linear map equivalent to :func:`apply_pi_pulse`."""
    return apply_pi_pulse(np.eye(7), transition, f).T


@dataclass(frozen=True)
class FidelityModel:
    """Effective pi-pulse fidelity decreasing linearly with the pumping rate."""

    f0: float
    slope: float = 0.0  # per MHz of gamma_P

    def __call__(self, gamma_P):
        return np.clip(self.f0 + self.slope * np.asarray(gamma_P, dtype=float), 0.0, 1.0)


FIDELITY_14N = FidelityModel(0.615, -0.00341)
FIDELITY_15N = FidelityModel(0.499, -0.00307)


def readout_average(t, trace, window: float) -> float:
    """Time average of ``trace`` over the last ``window`` ns."""
    t = np.asarray(t, dtype=float)
    y = np.asarray(trace, dtype=float)
    if t[-1] - t[0] < window - 1e-12:
        raise ValueError(f"trace spans {t[-1] - t[0]} ns, shorter than window {window} ns")
    start = t[-1] - window
    i = np.searchsorted(t, start, side="right")
    ts = np.concatenate([[start], t[i:]])
    ys = np.concatenate([[np.interp(start, t, y)], y[i:]])
    return float(np.trapezoid(ys, ts) / window)


def background_contrast(sig, ref, b: float = 0.0):
    """``(sig + b) / (ref + b)``."""
    den = np.asarray(ref, dtype=float) + b
    if np.any(den == 0):
        raise ZeroDivisionError("background_contrast: ref + b is zero")
    return (np.asarray(sig, dtype=float) + b) / den


@dataclass(frozen=True)
class Instrument:
    """Bundle of instrument settings used by the measurement protocols."""

    beam: BeamModel = field(default_factory=BeamModel)
    irf: IRFModel = field(default_factory=IRFModel)
    aom_ramp_ns: float = AOM_RAMP_NS
    readout_window_ns: float = READOUT_WINDOW_VB_NS

    @classmethod
    def ideal(cls, readout_window_ns: float = READOUT_WINDOW_VB_NS) -> "Instrument":
        return cls(BeamModel.uniform(), IRFModel(), 0.0, readout_window_ns)
