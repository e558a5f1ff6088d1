"""Seven-level classical rate equations for optically pumped spin-1 defects.

Populations are ordered ``(g+1, g0, g-1, e+1, e0, e-1, s)``.  The generator
``M`` acts on column vectors, ``dP/dt = M P``, with rates in MHz and time
handled internally in microseconds.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import expm

from .core import (
    BASIS_LABELS,
    E_0,
    E_M1,
    E_P1,
    EXCITED,
    G_0,
    G_M1,
    G_P1,
    S,
    DegeneracyError,
    ElectronicRates,
    ns_to_us,
)


@dataclass(frozen=True)
class PopulationTrajectory:
    times: np.ndarray  # ns
    states: np.ndarray  # (len(times), 7)

    def __post_init__(self):
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory times must be strictly increasing")

    def excited(self) -> np.ndarray:
        return self.states[:, list(EXCITED)].sum(axis=1)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t_ns", *BASIS_LABELS])
            for t, row in zip(self.times, self.states):
                w.writerow([repr(float(t)), *(repr(float(x)) for x in row)])


def _mixing_pair(mw_mixing) -> tuple[float, float]:
    if mw_mixing is None:
        return 0.0, 0.0
    if np.isscalar(mw_mixing):
        return float(mw_mixing), float(mw_mixing)
    om_p, om_m = mw_mixing
    return float(om_p), float(om_m)


def build_rate_matrix(rates: ElectronicRates, mw_mixing=None) -> np.ndarray:
    """Return the 7x7 generator (MHz) for ``rates``.

    ``mw_mixing`` is ``None``, a scalar applied to both transitions, or a pair
    ``(Omega_+1, Omega_-1)`` of incoherent g0<->g+-1 transfer rates.
    """
    GP, GE, GI = rates.gamma_P, rates.gamma_E, rates.gamma_ISC
    Gs, r, k, g1 = rates.gamma_s, rates.r, rates.k, rates.gamma_1
    M = np.zeros((7, 7))
    # optical pumping g_m -> e_m and spin-conserving decay e_m -> g_m
    for g, e in zip((G_P1, G_0, G_M1), (E_P1, E_0, E_M1)):
        M[e, g] += GP
        M[g, e] += GE
    # intersystem crossing into the singlet
    M[S, E_P1] += GI
    M[S, E_0] += r * GI
    M[S, E_M1] += GI
    # singlet decay
    M[G_0, S] += Gs
    M[G_P1, S] += k * Gs
    M[G_M1, S] += k * Gs
    # T1 mixing between neighbouring sublevels, same in both triplets
    for a, b, c in ((G_P1, G_0, G_M1), (E_P1, E_0, E_M1)):
        M[a, b] += g1 / 2
        M[b, a] += g1 / 2
        M[c, b] += g1 / 2
        M[b, c] += g1 / 2
    om_p, om_m = _mixing_pair(mw_mixing)
    if om_p < 0 or om_m < 0:
        raise ValueError("microwave mixing rates must be >= 0")
    M[G_P1, G_0] += om_p
    M[G_0, G_P1] += om_p
    M[G_M1, G_0] += om_m
    M[G_0, G_M1] += om_m
    M[np.diag_indices(7)] = 0.0
    M[np.diag_indices(7)] = -M.sum(axis=0)
    return M


def propagators(M: np.ndarray, times_ns) -> np.ndarray:
    """Stack of exp(M t) for each time (ns)."""
    if not np.all(np.isfinite(M)):
        raise ValueError("rate matrix has non-finite entries")
    t = np.atleast_1d(ns_to_us(times_ns))
    return expm(M[None, :, :] * t[:, None, None])


def evolve_populations(M: np.ndarray, p0, times) -> PopulationTrajectory:
    """Exact propagation ``P(t) = exp(M t) P0`` sampled at ``times`` (ns)."""
    p0 = np.asarray(p0, dtype=float)
    if abs(p0.sum() - 1.0) > 1e-9:
        raise ValueError(f"initial populations must sum to 1 (got {p0.sum():.12g})")
    times = np.asarray(times, dtype=float)
    states = propagators(M, times) @ p0
    return PopulationTrajectory(times, states)


def steady_state(M: np.ndarray) -> np.ndarray:
    """Normalized kernel vector of ``M`` via the smallest singular value."""
    if not np.all(np.isfinite(M)):
        raise ValueError("rate matrix has non-finite entries")
    _, s, vt = np.linalg.svd(M)
    scale = max(np.abs(M).max(), 1e-300)
    if s[-2] < 1e-8 * scale:
        raise DegeneracyError(
            f"rate matrix kernel is not one-dimensional (singular values {s[-2]:.3g}, {s[-1]:.3g})"
        )
    p = vt[-1]
    p = p / p.sum()
    p[np.abs(p) < 1e-15] = 0.0
    return p


def triplet_populations(p) -> np.ndarray:
    """(P_+1, P_0, P_-1) summed over ground and excited triplets."""
    p = np.asarray(p)
    return np.stack([p[..., G_P1] + p[..., E_P1], p[..., G_0] + p[..., E_0],
                     p[..., G_M1] + p[..., E_M1]], axis=-1)


def polarization(p) -> float | np.ndarray:
    """Fraction of the triplet population in m_s = 0."""
    P = triplet_populations(p)
    denom = P.sum(axis=-1)
    if np.any(denom <= 0):
        raise ValueError("polarization undefined: no triplet population")
    return P[..., 1] / denom


def excited_population(p):
    p = np.asarray(p)
    return p[..., E_P1] + p[..., E_0] + p[..., E_M1]


def odmr_contrast(rates: ElectronicRates, omega: float, gamma_P: float | None = None,
                  transitions: str = "-1", background: float = 0.0) -> float:
    """CW contrast ``1 - (PL_on + b)/(PL_off + b)`` from steady states.

    ``transitions`` selects which ground-state line is driven: ``"-1"``,
    ``"+1"`` or ``"both"``.
    """
    if omega < 0:
        raise ValueError("omega must be >= 0")
    if gamma_P is not None:
        rates = rates.replace(gamma_P=gamma_P)
    if rates.gamma_P <= 0:
        raise ValueError("gamma_P must be > 0")
    mix = {"-1": (0.0, omega), "+1": (omega, 0.0), "both": (omega, omega)}[transitions]
    off = excited_population(steady_state(build_rate_matrix(rates)))
    on = excited_population(steady_state(build_rate_matrix(rates, mix)))
    return float(1.0 - (on + background) / (off + background))


def differential_decay(rates: ElectronicRates, t) -> np.ndarray:
    """Unit-amplitude bi-exponential e^{-t/tau0} - e^{-t/tau1}, t in ns."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("t must be >= 0")
    t_us = t * 1e-3
    return np.exp(-(rates.gamma_E + rates.r * rates.gamma_ISC) * t_us) - np.exp(
        -(rates.gamma_E + rates.gamma_ISC) * t_us
    )


def differential_peak_time(rates: ElectronicRates) -> float:
    """Time (ns) of the maximum of :func:`differential_decay`."""
    a = 1.0 / rates.tau0
    b = 1.0 / rates.tau1
    return float(np.log(b / a) / (b - a))


def basis_state(label: str) -> np.ndarray:
    p = np.zeros(7)
    p[BASIS_LABELS.index(label)] = 1.0
    return p


def unpolarized_ground() -> np.ndarray:
    p = np.zeros(7)
    p[[G_P1, G_0, G_M1]] = 1.0 / 3.0
    return p


def check_populations(states: np.ndarray, atol_sum: float = 1e-9,
                      min_value: float = -1e-9) -> None:
    """Raise AssertionError if a population array violates conservation/positivity."""
    states = np.atleast_2d(states)
    drift = np.abs(states.sum(axis=-1) - 1.0).max()
    if drift > atol_sum:
        raise AssertionError(f"probability not conserved: max drift {drift:.3g}")
    if states.min() < min_value:
        raise AssertionError(f"negative population {states.min():.3g}")


__all__: Sequence[str] = [
    "PopulationTrajectory",
    "build_rate_matrix",
    "propagators",
    "evolve_populations",
    "steady_state",
    "polarization",
    "triplet_populations",
    "excited_population",
    "odmr_contrast",
    "differential_decay",
    "differential_peak_time",
    "basis_state",
    "unpolarized_ground",
    "check_populations",
]
