"""Optical spin pumping of boron-vacancy and NV centres: rate and Lindblad
models, measurement protocols, global fitting and a command-line driver."""

from .core import (
    ElectronicRates,
    MagneticField,
    NuclearSpecies,
    SpinSystemConfig,
    get_preset,
    get_system,
    load_config,
)

__version__ = "0.1.0"

__all__ = [
    "ElectronicRates",
    "MagneticField",
    "NuclearSpecies",
    "SpinSystemConfig",
    "get_preset",
    "get_system",
    "load_config",
]
