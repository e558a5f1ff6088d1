"""Shared types, unit conventions, spin operators and configuration loading.

Unit conventions used throughout the package:

* rates and frequencies are ordinary (non-angular) MHz, i.e. 1/us;
* times exposed by public functions are in ns;
* magnetic fields are in mT, angles in degrees;
* nuclear gyromagnetic ratios are in kHz/mT (signed).

The 2*pi factor that turns a frequency into an angular frequency is applied
once, when a Hamiltonian is assembled (see :mod:`vbspin.lindblad`).
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

# Basis ordering shared by every module.
BASIS_LABELS = ("g+1", "g0", "g-1", "e+1", "e0", "e-1", "s")
G_P1, G_0, G_M1, E_P1, E_0, E_M1, S = range(7)
GROUND = (G_P1, G_0, G_M1)
EXCITED = (E_P1, E_0, E_M1)

GAMMA_N_14N = 3.076  # kHz/mT
GAMMA_N_15N = -4.315  # kHz/mT
ISOTOPE_RATIO = GAMMA_N_15N / GAMMA_N_14N

CONFIG_ENV_VAR = "VBSPIN_CONFIG"


class ConfigError(ValueError):
    """Invalid or inconsistent configuration; message carries the field path."""


class DegeneracyError(RuntimeError):
    """A generator has no unique stationary state."""


def ns_to_us(t):
    return np.asarray(t, dtype=float) * 1e-3


@dataclass(frozen=True)
class ElectronicRates:
    """Seven-level transition rates, all in MHz (r and k are dimensionless)."""

    gamma_P: float = 0.0
    gamma_E: float = 849.0
    gamma_ISC: float = 1286.0
    gamma_s: float = 22.3
    r: float = 0.0
    k: float = 0.21
    gamma_1: float = 1.0 / 15.0
    gamma_2: float = 1.0 / 0.062

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, (int, float, np.floating, np.integer)) or not math.isfinite(v):
                raise ConfigError(f"rates.{f.name}: expected a finite number, got {v!r}")
            if v < 0:
                raise ConfigError(f"rates.{f.name}: must be >= 0, got {v}")

    def replace(self, **changes) -> "ElectronicRates":
        return dataclasses.replace(self, **changes)

    @property
    def tau0(self) -> float:
        """1/e decay time of |e0> in ns."""
        return 1e3 / (self.gamma_E + self.r * self.gamma_ISC)

    @property
    def tau1(self) -> float:
        """1/e decay time of |e+-1> in ns."""
        return 1e3 / (self.gamma_E + self.gamma_ISC)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class NuclearSpecies:
    spin: float
    gamma_n: float
    A_gs: np.ndarray
    A_es: np.ndarray
    Q_zz: float = 0.0
    label: str = ""

    def __post_init__(self):
        if not _is_half_integer(self.spin) or self.spin not in (0.5, 1.0):
            raise ConfigError(f"nuclei.{self.label}.spin: must be 1/2 or 1, got {self.spin}")
        if self.spin == 0.5 and self.Q_zz != 0.0:
            raise ConfigError(f"nuclei.{self.label}.Q_zz: must be 0 for spin 1/2")
        for name in ("A_gs", "A_es"):
            a = np.asarray(getattr(self, name), dtype=float)
            if a.shape != (3, 3) or not np.all(np.isfinite(a)):
                raise ConfigError(f"nuclei.{self.label}.{name}: expected a finite 3x3 tensor")
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @property
    def dim(self) -> int:
        return int(round(2 * self.spin + 1))

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "spin": self.spin,
            "gamma_n": self.gamma_n,
            "Q_zz": self.Q_zz,
            "A_gs": self.A_gs.tolist(),
            "A_es": self.A_es.tolist(),
        }


@dataclass(frozen=True)
class SpinSystemConfig:
    D_gs: float = 3480.0
    D_es: float = 2100.0
    gamma_e: float = 28.0
    nuclei: tuple[NuclearSpecies, ...] = ()

    def __post_init__(self):
        if not self.D_gs > 0 or not self.D_es > 0:
            raise ConfigError("system.D_gs/D_es: zero-field splittings must be > 0")
        object.__setattr__(self, "nuclei", tuple(self.nuclei))

    @property
    def nuclear_dims(self) -> tuple[int, ...]:
        return tuple(n.dim for n in self.nuclei)

    @property
    def total_dim(self) -> int:
        return 7 * int(np.prod(self.nuclear_dims, dtype=int))

    def without_hyperfine(self) -> "SpinSystemConfig":
        return dataclasses.replace(self, nuclei=())

    def rescale_nuclei(self, factor: float) -> "SpinSystemConfig":
        """Multiply every hyperfine tensor and nuclear gyromagnetic ratio by ``factor``.

        ``factor = 1/ISOTOPE_RATIO`` applied to the 15N system inverts the
        isotope rule while keeping spin 1/2 nuclei.
        """
        nuc = tuple(
            dataclasses.replace(n, A_gs=n.A_gs * factor, A_es=n.A_es * factor,
                                gamma_n=n.gamma_n * factor)
            for n in self.nuclei
        )
        return dataclasses.replace(self, nuclei=nuc)

    def to_dict(self) -> dict:
        return {
            "D_gs": self.D_gs,
            "D_es": self.D_es,
            "gamma_e": self.gamma_e,
            "nuclei": [n.to_dict() for n in self.nuclei],
        }


@dataclass(frozen=True)
class MagneticField:
    B_mag: float
    theta: float = 0.0
    phi: float = 0.0

    def __post_init__(self):
        if self.B_mag < 0:
            raise ValueError("B_mag must be >= 0")

    @property
    def vector(self) -> np.ndarray:
        th, ph = math.radians(self.theta), math.radians(self.phi)
        return self.B_mag * np.array(
            [math.sin(th) * math.cos(ph), math.sin(th) * math.sin(ph), math.cos(th)]
        )

    @property
    def Bz(self) -> float:
        return float(self.vector[2])

    @classmethod
    def from_bz(cls, Bz: float, theta: float = 0.0, phi: float = 0.0) -> "MagneticField":
        """Field whose z-component is ``Bz`` at tilt ``theta`` (a pure added B_x for phi=0)."""
        return cls(Bz / math.cos(math.radians(theta)), theta, phi)


def _is_half_integer(x: float) -> bool:
    return x >= 0 and abs(2 * x - round(2 * x)) < 1e-12


def spin_operators(I: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (Sx, Sy, Sz) for spin ``I`` in the basis m = I, I-1, ..., -I."""
    if not _is_half_integer(I):
        raise ValueError(f"spin must be a non-negative half-integer, got {I}")
    m = I - np.arange(int(round(2 * I + 1)))
    # <m+1|S+|m> = sqrt(I(I+1) - m(m+1))
    sp = np.diag(np.sqrt(I * (I + 1) - m[1:] * (m[1:] + 1)), k=1).astype(complex)
    sm = sp.conj().T
    sx = (sp + sm) / 2
    sy = (sp - sm) / 2j
    sz = np.diag(m).astype(complex)
    return sx, sy, sz


def zeeman_splitting(Bz: float, gamma_e: float = 28.0) -> float:
    """f(+1) - f(-1) in MHz for an axial field ``Bz`` (mT)."""
    return 2.0 * gamma_e * Bz


def odmr_center_shift(Bt: float, Bz: float, cfg: SpinSystemConfig | None = None) -> float:
    """Second-order shift (MHz) of the ODMR center frequency from a transverse field."""
    cfg = cfg or SpinSystemConfig()
    ge, D = cfg.gamma_e, cfg.D_gs
    lo, hi = D - ge * Bz, D + ge * Bz
    if abs(lo) < 1e-12 or abs(hi) < 1e-12:
        raise ValueError(f"odmr_center_shift: pole at gamma_e*Bz = +-D_gs (Bz={Bz} mT)")
    return 0.75 * ge**2 * Bt**2 * (1.0 / lo + 1.0 / hi)


def scale_hyperfine_isotope(tensors, ratio: float = ISOTOPE_RATIO):
    """Convert 14N hyperfine tensors to 15N by the gyromagnetic ratio (sign inverting).

    Accepts a single tensor or a sequence of tensors; returns the same shape.
    """
    a = np.asarray(tensors, dtype=float)
    if not np.all(np.isfinite(a)):
        raise ValueError("hyperfine tensors must be finite")
    return a * ratio


# ---------------------------------------------------------------- config I/O


def _data_path(name: str) -> Path:
    return Path(str(resources.files("vbspin") / "data" / name))


def _load_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON ({exc})") from exc


def _rates_from_dict(d: Mapping[str, Any], path: str) -> ElectronicRates:
    names = {f.name for f in dataclasses.fields(ElectronicRates)}
    unknown = set(d) - names - {"description"}
    if unknown:
        raise ConfigError(f"{path}: unknown field(s) {sorted(unknown)}")
    kw = {k: v for k, v in d.items() if k in names}
    for req in ("gamma_E", "gamma_ISC", "gamma_s", "r", "k"):
        if req not in kw:
            raise ConfigError(f"{path}.{req}: missing field")
    try:
        return ElectronicRates(**kw)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _nuclei_from_hyperfine_asset(asset: Mapping, isotope: str | None) -> list[NuclearSpecies]:
    nuclei = []
    for i, n in enumerate(asset["nuclei"]):
        A_gs, A_es = np.asarray(n["A_gs"], float), np.asarray(n["A_es"], float)
        if isotope == "15N":
            nuclei.append(
                NuclearSpecies(0.5, GAMMA_N_15N, scale_hyperfine_isotope(A_gs),
                               scale_hyperfine_isotope(A_es), 0.0, n.get("label", f"N{i + 1}"))
            )
        else:
            nuclei.append(
                NuclearSpecies(asset.get("spin", 1.0), asset.get("gamma_n", GAMMA_N_14N), A_gs,
                               A_es, asset.get("Q_zz", 0.0), n.get("label", f"N{i + 1}"))
            )
    return nuclei


def system_from_dict(d: Mapping[str, Any], base_dir: Path | None = None,
                     path: str = "system") -> SpinSystemConfig:
    nuclei: list[NuclearSpecies] = []
    if d.get("nuclei"):
        for i, n in enumerate(d["nuclei"]):
            p = f"{path}.nuclei[{i}]"
            for req in ("spin", "gamma_n", "A_gs", "A_es"):
                if req not in n:
                    raise ConfigError(f"{p}.{req}: missing field")
            try:
                nuclei.append(NuclearSpecies(float(n["spin"]), float(n["gamma_n"]), n["A_gs"],
                                             n["A_es"], float(n.get("Q_zz", 0.0)),
                                             n.get("label", f"N{i + 1}")))
            except ConfigError as exc:
                raise ConfigError(f"{p}: {exc}") from None
    elif d.get("hyperfine"):
        hf = Path(d["hyperfine"])
        if not hf.is_absolute():
            local = (base_dir / hf) if base_dir else None
            hf = local if local is not None and local.exists() else _data_path(str(hf))
        nuclei = _nuclei_from_hyperfine_asset(_load_json(hf), d.get("isotope"))
        n_nuc = d.get("n_nuclei")
        if n_nuc is not None:
            nuclei = nuclei[: int(n_nuc)]
    try:
        return SpinSystemConfig(float(d.get("D_gs", 3480.0)), float(d.get("D_es", 2100.0)),
                                float(d.get("gamma_e", 28.0)), tuple(nuclei))
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


@dataclass
class Config:
    """A resolved configuration: spin system plus named rate presets."""

    system: SpinSystemConfig = field(default_factory=SpinSystemConfig)
    rates: dict[str, ElectronicRates] = field(default_factory=dict)
    systems: dict[str, SpinSystemConfig] = field(default_factory=dict)
    extras: dict[str, Any] = field(default_factory=dict)

    def preset(self, name: str) -> ElectronicRates:
        try:
            return self.rates[name]
        except KeyError:
            raise KeyError(f"unknown preset {name!r}; available: {sorted(self.rates)}") from None

    def to_dict(self) -> dict:
        return {
            "system": self.system.to_dict(),
            "rates": {k: v.to_dict() for k, v in self.rates.items()},
            **self.extras,
        }


def config_from_dict(d: Mapping[str, Any], base_dir: Path | None = None) -> Config:
    rates = {}
    for name, rd in (d.get("rates") or {}).items():
        rates[name] = _rates_from_dict(rd, f"rates.{name}")
    systems = {}
    for name, sd in (d.get("systems") or {}).items():
        systems[name] = system_from_dict(sd, base_dir, f"systems.{name}")
    system = system_from_dict(d["system"], base_dir) if "system" in d else SpinSystemConfig()
    extras = {k: v for k, v in d.items() if k not in ("rates", "systems", "system")}
    return Config(system, rates, systems, extras)


def load_config(path=None) -> Config:
    """Load a JSON config. ``None`` means $VBSPIN_CONFIG or the bundled presets."""
    if path is None:
        path = os.environ.get(CONFIG_ENV_VAR) or _data_path("presets.json")
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{path}: config file not found")
    return config_from_dict(_load_json(path), path.parent)


def save_config(cfg: Config, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2), encoding="utf-8")


_BUNDLED: Config | None = None


def bundled() -> Config:
    global _BUNDLED
    if _BUNDLED is None:
        _BUNDLED = config_from_dict(_load_json(_data_path("presets.json")), _data_path("."))
    return _BUNDLED


def get_preset(name: str) -> ElectronicRates:
    return bundled().preset(name)


def get_system(name: str = "vb-15n", n_nuclei: int | None = None) -> SpinSystemConfig:
    try:
        sys_ = bundled().systems[name]
    except KeyError:
        raise KeyError(f"unknown system {name!r}; available: {sorted(bundled().systems)}") from None
    if n_nuclei is not None:
        sys_ = dataclasses.replace(sys_, nuclei=sys_.nuclei[:n_nuclei])
    return sys_


def list_presets() -> list[str]:
    return sorted(bundled().rates)


def as_populations(p: Sequence[float]) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.shape != (7,):
        raise ValueError(f"populations must be a 7-vector, got shape {p.shape}")
    return p
