"""Figure output for the CLI. Figures are written to files only."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_curves(x, curves: Mapping[str, np.ndarray], path, xlabel: str = "t (ns)",
                ylabel: str = "signal", title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, y in curves.items():
        ax.plot(x, y, label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    if len(curves) > 1:
        ax.legend(fontsize=8)
    return _save(fig, path)


def plot_heatmap(Bz: Sequence[float], theta: Sequence[float], values: np.ndarray, path,
                 label: str = "timescale (ns)", title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(7, 3.5))
    Bz = np.asarray(Bz, dtype=float)
    theta = np.asarray(theta, dtype=float)
    dB = np.diff(Bz).mean() if Bz.size > 1 else 1.0
    dT = np.diff(theta).mean() if theta.size > 1 else 1.0
    extent = (Bz[0] - dB / 2, Bz[-1] + dB / 2, theta[0] - dT / 2, theta[-1] + dT / 2)
    im = ax.imshow(np.ma.masked_invalid(values), origin="lower", aspect="auto", extent=extent,
                   cmap="viridis")
    fig.colorbar(im, ax=ax, label=label)
    ax.set_xlabel("B_z (mT)")
    ax.set_ylabel("theta (deg)")
    if title:
        ax.set_title(title)
    return _save(fig, path)


def plot_fit(datasets, models: Sequence[np.ndarray], path, max_panels: int = 12) -> Path:
    n = min(len(datasets), max_panels)
    cols = min(n, 3)
    rows = int(np.ceil(n / cols))
    fig, axes = plt.subplots(rows, cols, figsize=(4 * cols, 2.8 * rows), squeeze=False)
    for ax, d, m in zip(axes.flat, datasets, models):
        ax.plot(d.times, d.signal, ".", ms=3, label="data")
        ax.plot(d.times, m, "-", label="fit")
        ax.set_title(d.name, fontsize=8)
        ax.tick_params(labelsize=7)
    for ax in list(axes.flat)[n:]:
        ax.axis("off")
    return _save(fig, path)
