"""Patchify, block-wise masking and jigsaw shuffling of masked patches.

Images are ``H x W x C`` float arrays (channel last).  A patch sequence has
one row per patch in row-major grid order, each row the patch's pixels
flattened as ``(row, col, channel)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError

# stream tags for make_rng; keep stable, they are part of reproducibility
STREAM_MASK = 1
STREAM_PERM = 2
STREAM_PIXEL = 3
STREAM_INIT = 4
STREAM_BATCH = 5
STREAM_DATA = 6
STREAM_EVAL = 7
STREAM_FOLDS = 8


def make_rng(seed: int, *stream) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by ``seed`` and a stream path.

    Different stream paths give statistically independent sequences, so
    e.g. the mask stream of iteration ``t`` does not depend on how many
    permutation draws happened before it.
    """
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(ss))


def patchify(img: np.ndarray, p: int) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3:
        raise DimensionError(f"expected H x W x C image, got shape {img.shape}")
    h, w, c = img.shape
    if p <= 0 or h % p or w % p:
        raise DimensionError(f"image {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    return img.reshape(gh, p, gw, p, c).transpose(0, 2, 1, 3, 4).reshape(gh * gw, p * p * c)


def unpatchify(patches: np.ndarray, h: int, w: int, c: int, p: int) -> np.ndarray:
    patches = np.asarray(patches)
    if h % p or w % p:
        raise DimensionError(f"image {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    if patches.shape != (gh * gw, p * p * c):
        raise DimensionError(f"patch array {patches.shape} does not fit {h}x{w}x{c} with P={p}")
    return patches.reshape(gh, gw, p, p, c).transpose(0, 2, 1, 3, 4).reshape(h, w, c)


def patchify_batch(imgs: np.ndarray, p: int) -> np.ndarray:
    """``B x H x W x C`` -> ``B x N x P*P*C``."""
    b, h, w, c = imgs.shape
    if h % p or w % p:
        raise DimensionError(f"image {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    return imgs.reshape(b, gh, p, gw, p, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, gh * gw, p * p * c)


def blockwise_mask(grid_h: int, grid_w: int, gamma: float, rng: np.random.Generator,
                   min_block_area: int = 4, max_block_area: int | None = None,
                   min_aspect: float = 0.3, max_attempts: int = 10) -> np.ndarray:
    """Grow a ``grid_h x grid_w`` 0/1 mask from random rectangles until at
    least ``gamma * N`` cells are set.

    Each round draws a target area between ``min_block_area`` and the number
    of cells still needed (capped by ``max_block_area``), a log-uniform aspect
    ratio in ``[min_aspect, 1/min_aspect]`` and a uniform location.  The last
    block is kept whole, so the count may overshoot by less than its area.
    If ``max_attempts`` draws in a row add nothing, one random unset cell is
    set instead, which guarantees termination.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ContractError(f"gamma must lie in [0, 1], got {gamma}")
    n = grid_h * grid_w
    mask = np.zeros((grid_h, grid_w), dtype=np.int8)
    # tolerate float noise such as 0.15 * 196 = 29.400000000000002
    target = min(n, math.ceil(gamma * n - 1e-9))
    if max_block_area is None:
        max_block_area = n
    log_lo, log_hi = math.log(min_aspect), math.log(1.0 / min_aspect)
    count = 0
    while count < target:
        remaining = target - count
        hi = max(min_block_area, min(remaining, max_block_area))
        added = 0
        for _ in range(max_attempts):
            area = rng.uniform(min_block_area, hi)
            ratio = math.exp(rng.uniform(log_lo, log_hi))
            bh = int(round(math.sqrt(area * ratio)))
            bw = int(round(math.sqrt(area / ratio)))
            if not (1 <= bh <= grid_h and 1 <= bw <= grid_w):
                continue
            top = int(rng.integers(0, grid_h - bh + 1))
            left = int(rng.integers(0, grid_w - bw + 1))
            block = mask[top:top + bh, left:left + bw]
            added = int(block.size - block.sum())
            if added:
                block[...] = 1
                break
        if not added:
            free = np.flatnonzero(mask.reshape(-1) == 0)
            mask.reshape(-1)[free[rng.integers(0, free.size)]] = 1
            added = 1
        count += added
    return mask


def jigsaw_permutation(mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Uniform random permutation ``pi`` of the masked index set, identity elsewhere.

    ``pi[j]`` is the destination slot of source patch ``j``.
    """
    flat = np.asarray(mask).reshape(-1)
    idx = np.flatnonzero(flat)
    pi = np.arange(flat.size)
    if idx.size > 1:
        pi[idx] = idx[rng.permutation(idx.size)]
    return pi


def apply_permutation(patches: np.ndarray, pi: np.ndarray) -> np.ndarray:
    """Output row ``pi[j]`` holds input row ``j``."""
    out = np.empty_like(patches)
    out[..., pi, :] = patches
    return out


def invert_permutation(pi: np.ndarray) -> np.ndarray:
    inv = np.empty_like(pi)
    inv[pi] = np.arange(pi.size)
    return inv


def jigsaw_shuffle(patches: np.ndarray, mask: np.ndarray, rng: np.random.Generator):
    """Shuffle the masked rows of ``patches``; return ``(shuffled, pi)``."""
    patches = np.asarray(patches)
    if np.asarray(mask).size != patches.shape[-2]:
        raise DimensionError(f"mask has {np.asarray(mask).size} cells for {patches.shape[-2]} patches")
    pi = jigsaw_permutation(mask, rng)
    return apply_permutation(patches, pi), pi


def pixel_shuffle(patches: np.ndarray, p: int, c: int, rng: np.random.Generator) -> np.ndarray:
    """Permute pixel positions inside every patch independently (channels stay together)."""
    n = patches.shape[0]
    px = patches.reshape(n, p * p, c)
    order = np.argsort(rng.random((n, p * p)), axis=1)
    return np.take_along_axis(px, order[:, :, None], axis=1).reshape(n, p * p * c)


@dataclass
class PatchBundle:
    """Result of one block-wise jigsaw draw on one image."""

    patches: np.ndarray        # N x P*P*C, already shuffled
    mask: np.ndarray           # grid_h x grid_w, 0/1
    perm: np.ndarray           # destination slot of each source patch
    gamma: float

    @property
    def realized_ratio(self) -> float:
        return float(self.mask.mean())


def block_jigsaw(img: np.ndarray, p: int, gamma: float, rng_mask: np.random.Generator,
                 rng_perm: np.random.Generator, min_block_area: int = 4) -> PatchBundle:
    """Patchify, draw a block-wise mask and shuffle the masked patches."""
    x = patchify(img, p)
    gh, gw = img.shape[0] // p, img.shape[1] // p
    mask = blockwise_mask(gh, gw, gamma, rng_mask, min_block_area=min_block_area)
    shuffled, pi = jigsaw_shuffle(x, mask, rng_perm)
    return PatchBundle(shuffled, mask, pi, gamma)


def write_permutation(path, pi: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, j in enumerate(pi):
            fh.write(f"{i} -> {int(j)}\n")


def read_permutation(path) -> np.ndarray:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                a, b = line.split("->")
                pairs.append((int(a), int(b)))
    pi = np.empty(len(pairs), dtype=np.intp)
    for a, b in pairs:
        pi[a] = b
    return pi
