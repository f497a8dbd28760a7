"""Spectral and probing analysis of position-embedding tables.

All functions take the patch rows of a table (``N x D``, no [CLS] row);
:func:`position_table` strips it from a snapshot.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .jigsaw import STREAM_FOLDS, make_rng

PROBE_FOLDS = 5
RIDGE = 1e-10


@dataclass
class SpectralSummary:
    singular_values: np.ndarray   # descending
    ratios: np.ndarray            # per-dimension share of the squared spectrum
    cumulative: np.ndarray        # nondecreasing, last entry exactly 1.0

    def explained(self, dims: int) -> float:
        return float(self.cumulative[dims - 1])


@dataclass
class ProbeResult:
    mae_1d: float
    std_1d: float
    mae_2d: float
    std_2d: float
    fold_1d: list
    fold_2d: list
    train_1d: float
    train_2d: float


def position_table(snap) -> np.ndarray:
    """Patch rows of the learned position table (row 0 belongs to [CLS])."""
    return snap.params["embed.pos"].data[1:].copy()


def _prepare(pe, center: bool) -> np.ndarray:
    p = np.asarray(pe, dtype=np.float64)
    if p.ndim != 2:
        raise ContractError(f"expected an N x D table, got shape {p.shape}")
    return p - p.mean(axis=0) if center else p


def spectral_summary(pe, center: bool = True) -> SpectralSummary:
    p = _prepare(pe, center)
    s = np.linalg.svd(p, compute_uv=False)
    energy = np.cumsum(s ** 2)
    total = energy[-1] if energy.size else 0.0
    if total <= 0.0:
        raise ContractError("table has no energy to explain")
    return SpectralSummary(s, s ** 2 / total, energy / total)


def pca_explained_variance(pe, dims: int, center: bool = True) -> float:
    """Share of the squared singular values held by the top ``dims`` directions."""
    n, d = np.shape(pe)
    if not 1 <= dims <= min(n, d):
        raise ContractError(f"dims must be in [1, {min(n, d)}], got {dims}")
    return spectral_summary(pe, center).explained(dims)


def cumulative_energy(pe, center: bool = True) -> np.ndarray:
    return spectral_summary(pe, center).cumulative


def pca_project(pe, k: int = 2, center: bool = True) -> np.ndarray:
    """Row coordinates on the top ``k`` principal directions (``N x k``)."""
    p = _prepare(pe, center)
    if not 1 <= k <= min(p.shape):
        raise ContractError(f"k must be in [1, {min(p.shape)}], got {k}")
    u, s, _ = np.linalg.svd(p, full_matrices=False)
    # fix signs so exports do not flip between LAPACK builds
    sign = np.sign(u[np.argmax(np.abs(u), axis=0), np.arange(u.shape[1])])
    sign[sign == 0] = 1.0
    return (u[:, :k] * sign[:k]) * s[:k]


def _fit(x, y, ridge):
    a = np.hstack([np.ones((len(x), 1)), x])
    gram = a.T @ a
    gram[np.diag_indices_from(gram)] += ridge
    return np.linalg.solve(gram, a.T @ y)


def _predict(x, beta):
    return beta[0] + x @ beta[1:]


def grid_side(n: int) -> int:
    k = math.isqrt(n)
    if k * k != n:
        raise ContractError(f"{n} rows do not form a square grid")
    return k


def position_probe(pe, folds: int = PROBE_FOLDS, seed: int = 0, ridge: float = RIDGE) -> ProbeResult:
    """Linear regression from PE rows to the 1-D index and to raw (row, col)
    grid coordinates, scored by k-fold cross-validated MAE."""
    p = np.asarray(pe, dtype=np.float64)
    n = p.shape[0]
    k = grid_side(n)
    idx = np.arange(n, dtype=np.float64)
    yx = np.stack([idx // k, idx % k], axis=1)
    order = make_rng(seed, STREAM_FOLDS).permutation(n)
    parts = np.array_split(order, folds)
    f1, f2 = [], []
    for test in parts:
        train = np.setdiff1d(order, test)
        b1 = _fit(p[train], idx[train], ridge)
        b2 = _fit(p[train], yx[train], ridge)
        f1.append(float(np.mean(np.abs(_predict(p[test], b1) - idx[test]))))
        f2.append(float(np.mean(np.abs(_predict(p[test], b2) - yx[test]))))
    b1 = _fit(p, idx, ridge)
    b2 = _fit(p, yx, ridge)
    return ProbeResult(float(np.mean(f1)), float(np.std(f1)), float(np.mean(f2)), float(np.std(f2)), f1, f2,
                       float(np.mean(np.abs(_predict(p, b1) - idx))),
                       float(np.mean(np.abs(_predict(p, b2) - yx))))


def pca_rows(pe, k: int = 2, center: bool = True):
    """``(header, rows)`` for a CSV of projected coordinates with grid labels."""
    coords = pca_project(pe, k, center)
    n = coords.shape[0]
    side = grid_side(n)
    header = ["index", "row", "col"] + [f"pc{i + 1}" for i in range(k)]
    rows = [[i, i // side, i % side, *coords[i].tolist()] for i in range(n)]
    return header, rows
