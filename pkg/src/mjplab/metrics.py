"""Classification consistency metrics and image-similarity scores."""

from __future__ import annotations

import math

import numpy as np

from .errors import DimensionError


def diff_norm(cls_a, cls_b, squared: bool = True) -> float:
    """Squared (default) or plain Euclidean distance between two [CLS] embeddings."""
    a, b = np.asarray(cls_a, dtype=np.float64), np.asarray(cls_b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"diff_norm: {a.shape} vs {b.shape}")
    d = float(np.sum((a - b) ** 2))
    return d if squared else math.sqrt(d)


def consistency(logits_a, logits_b) -> float:
    """Fraction of rows whose argmax agrees; ties go to the lowest index."""
    a, b = np.atleast_2d(logits_a), np.atleast_2d(logits_b)
    if a.shape != b.shape:
        raise DimensionError(f"consistency: {a.shape} vs {b.shape}")
    if a.shape[0] == 0:
        return float("nan")
    return float(np.mean(np.argmax(a, axis=1) == np.argmax(b, axis=1)))


def top1(logits, labels) -> float:
    return float(np.mean(np.argmax(np.atleast_2d(logits), axis=1) == np.asarray(labels)))


def _check_pair(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    return a, b


def mse(a, b) -> float:
    a, b = _check_pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio for unit peak; ``inf`` when the images match."""
    err = mse(a, b)
    return math.inf if err == 0.0 else 10.0 * math.log10(1.0 / err)


SSIM_WINDOW = 8
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def ssim(a, b, window: int = SSIM_WINDOW) -> float:
    """Mean SSIM over non-overlapping ``window``-square tiles and channels.

    Images smaller than the window use a single tile covering the image;
    rows/columns left over by the tiling are ignored.
    """
    a, b = _check_pair(a, b)
    h, w, c = a.shape
    wh, ww = min(window, h), min(window, w)
    th, tw = h // wh, w // ww

    def tiles(x):
        x = x[:th * wh, :tw * ww]
        return x.reshape(th, wh, tw, ww, c).transpose(0, 2, 4, 1, 3).reshape(-1, wh * ww)

    ta, tb = tiles(a), tiles(b)
    mu_a, mu_b = ta.mean(axis=1), tb.mean(axis=1)
    va, vb = ta.var(axis=1), tb.var(axis=1)
    cov = ((ta - mu_a[:, None]) * (tb - mu_b[:, None])).mean(axis=1)
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (va + vb + SSIM_C2)
    return float(np.mean(num / den))


def dft_matrix(n: int) -> np.ndarray:
    k = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(k, k) / n)


def dft2(x: np.ndarray) -> np.ndarray:
    """2-D DFT of an ``H x W`` array as two dense matrix products."""
    h, w = x.shape
    return dft_matrix(h) @ x @ dft_matrix(w)


def fft2d_cos(a, b) -> float:
    """Cosine similarity of 2-D DFT magnitude spectra, averaged over channels."""
    a, b = _check_pair(a, b)
    sims = []
    for ch in range(a.shape[2]):
        ma = np.abs(dft2(a[..., ch])).ravel()
        mb = np.abs(dft2(b[..., ch])).ravel()
        na, nb = np.linalg.norm(ma), np.linalg.norm(mb)
        if na == 0.0 and nb == 0.0:
            sims.append(1.0)
        elif na == 0.0 or nb == 0.0:
            sims.append(0.0)
        else:
            sims.append(float(ma @ mb / (na * nb)))
    return float(np.mean(sims))


def image_scores(recovered, reference) -> dict:
    """All similarity scores for one image pair (recovered clipped to [0, 1])."""
    rec = np.clip(np.asarray(recovered, dtype=np.float64), 0.0, 1.0)
    return {"mse": mse(rec, reference), "psnr": psnr(rec, reference),
            "ssim": ssim(rec, reference), "fft2d_cos": fft2d_cos(rec, reference)}


def summarize(values) -> tuple[float, float]:
    """Mean and population std, with infinities kept out of the std."""
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        return float("nan"), float("nan")
    finite = v[np.isfinite(v)]
    if finite.size < v.size:
        return float("inf"), float(finite.std()) if finite.size else 0.0
    return float(v.mean()), float(v.std())
