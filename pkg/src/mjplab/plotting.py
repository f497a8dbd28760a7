"""Figures written alongside the CSV/JSON-lines reports (Agg backend, PNG)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

DPI = 120
FIGSIZE = (4.5, 3.4)


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    # no timestamp in metadata so identical data gives identical files
    fig.savefig(path, dpi=DPI, metadata={"Software": None})
    plt.close(fig)
    return path


def energy_curve(curves: dict, path, dims: int | None = None):
    """Cumulative eigen-energy per table; ``curves`` maps label -> curve."""
    fig, ax = plt.subplots(figsize=FIGSIZE)
    for label, curve in curves.items():
        c = np.asarray(curve)
        ax.plot(np.arange(1, len(c) + 1), c, marker=".", label=label)
    if dims is not None:
        ax.axvline(dims, color="0.6", lw=0.8, ls="--")
    ax.set_xlabel("dimension")
    ax.set_ylabel("cumulative energy")
    ax.set_ylim(0, 1.02)
    ax.legend(frameon=False)
    return _save(fig, path)


def gamma_sweep(rows, path, metric: str = "consistency"):
    """Metric vs. eval mask ratio, from ``evaluate`` rows."""
    g = [r["gamma_eval"] for r in rows]
    v = [r[metric] for r in rows]
    fig, ax = plt.subplots(figsize=FIGSIZE)
    std = [r.get(metric + "_std") for r in rows]
    if all(s is not None for s in std):
        ax.errorbar(g, v, yerr=std, marker="o", capsize=3)
    else:
        ax.plot(g, v, marker="o")
    ax.set_xlabel("gamma (eval)")
    ax.set_ylabel(metric)
    return _save(fig, path)


def pe_scatter(coords, grid_side: int, path):
    """First two principal coordinates, coloured by row and column."""
    coords = np.asarray(coords)
    idx = np.arange(len(coords))
    fig, axes = plt.subplots(1, 2, figsize=(2 * FIGSIZE[0], FIGSIZE[1]))
    for ax, lab, val in zip(axes, ("row", "col"), (idx // grid_side, idx % grid_side)):
        sc = ax.scatter(coords[:, 0], coords[:, 1], c=val, cmap="viridis", s=18)
        fig.colorbar(sc, ax=ax, label=lab)
        ax.set_xlabel("pc1")
        ax.set_ylabel("pc2")
    return _save(fig, path)


def image_grid(columns: dict, path):
    """Images side by side; ``columns`` maps title -> list of H x W x C arrays."""
    titles = list(columns)
    n = max(len(v) for v in columns.values())
    fig, axes = plt.subplots(n, len(titles), figsize=(1.6 * len(titles), 1.6 * n), squeeze=False)
    for j, t in enumerate(titles):
        for i in range(n):
            ax = axes[i, j]
            ax.axis("off")
            if i < len(columns[t]):
                ax.imshow(np.clip(columns[t][i], 0, 1), interpolation="nearest")
            if i == 0:
                ax.set_title(t, fontsize=8)
    return _save(fig, path)


def training_curve(history, path):
    fig, ax = plt.subplots(figsize=FIGSIZE)
    ep = [h["epoch"] for h in history]
    ax.plot(ep, [h["total"] for h in history], label="loss")
    ax2 = ax.twinx()
    ax2.plot(ep, [h["acc"] for h in history], color="C1", label="acc")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax2.set_ylabel("train accuracy")
    return _save(fig, path)
