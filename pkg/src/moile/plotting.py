"""Figures for the report path. Everything renders to files with the Agg
backend; nothing here opens a window."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "savefig.bbox": "tight",
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_trajectories(curves: dict[str, list[float]], path, title: str = "first task") -> Path:
    """Accuracy on the first task after each training task, one line per
    variant."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        for label, ys in curves.items():
            ax.plot(np.arange(1, len(ys) + 1), ys, marker="o", ms=3, label=label)
        ax.set_xlabel("after training task")
        ax.set_ylabel("accuracy")
        ax.set_ylim(-0.02, 1.02)
        ax.set_title(title)
        ax.legend(frameon=False, fontsize=7)
        return _save(fig, path)


def plot_spectrum(spectra: dict[str, np.ndarray], path, p: int | None = None) -> Path:
    """Singular values per adapter, largest first; a dashed line marks the
    principal/residual split when ``p`` is given."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        for label, s in spectra.items():
            ax.plot(np.arange(1, len(s) + 1), s, lw=0.8, alpha=0.7, label=label)
        if p:
            ax.axvline(p + 0.5, ls="--", c="k", lw=0.8)
        ax.set_xlabel("index")
        ax.set_ylabel("singular value")
        if len(spectra) <= 8:
            ax.legend(frameon=False, fontsize=6)
        return _save(fig, path)


def plot_router_preference(pref: list, path, layer: int = 0, level: str = "token") -> Path:
    """Heatmap of mean gate weight, tasks by experts."""
    rows = [entry["layers"][layer].get(level) for entry in pref]
    if any(r is None for r in rows):
        raise ValueError(f"no {level} gates recorded for layer {layer}")
    grid = np.array(rows)
    with plt.rc_context(STYLE | {"axes.grid": False}):
        fig, ax = plt.subplots(figsize=(0.5 * grid.shape[1] + 2, 0.35 * grid.shape[0] + 1.2))
        im = ax.imshow(grid, cmap="viridis", aspect="auto", vmin=0)
        ax.set_yticks(range(len(pref)), [e["task"] for e in pref], fontsize=6)
        ax.set_xticks(range(grid.shape[1]))
        ax.set_xlabel(f"{level} expert")
        fig.colorbar(im, ax=ax, label="mean gate")
        return _save(fig, path)
