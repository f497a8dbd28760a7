"""Patch projection, position tables, the shared unknown-position row and
the dense absolute localization (DAL) regressors."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor

DAL_VARIANTS = ("ln", "nln", "pca")


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) redrawn outside +-2 std."""
    x = rng.normal(0.0, std, size=shape)
    bad = np.abs(x) > 2 * std
    while bad.any():
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(x) > 2 * std
    return x


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


@dataclass
class EmbeddingState:
    proj: Tensor          # (P*P*C) x D patch projection
    pos: Tensor           # (N+1) x D, row 0 belongs to [CLS]
    unk: Tensor           # 1 x D shared unknown-position embedding
    cls: Tensor           # 1 x D class token
    idx: Tensor | None = None   # N x D index table (experimental IDX variant)

    @property
    def num_patches(self) -> int:
        return self.pos.shape[0] - 1

    @property
    def dim(self) -> int:
        return self.pos.shape[1]


def init_embedding(rng: np.random.Generator, patch_dim: int, num_patches: int, dim: int,
                   use_pe: bool = True, use_idx: bool = False) -> EmbeddingState:
    pos = trunc_normal(rng, (num_patches + 1, dim)) if use_pe else np.zeros((num_patches + 1, dim))
    unk = trunc_normal(rng, (1, dim)) if use_pe else np.zeros((1, dim))
    return EmbeddingState(
        proj=Tensor(xavier_uniform(rng, patch_dim, dim), requires_grad=True, name="embed.proj"),
        pos=Tensor(pos, requires_grad=use_pe, name="embed.pos"),
        unk=Tensor(unk, requires_grad=use_pe, name="embed.unk"),
        cls=Tensor(trunc_normal(rng, (1, dim)), requires_grad=True, name="embed.cls"),
        idx=(Tensor(trunc_normal(rng, (num_patches, dim)), requires_grad=True, name="embed.idx")
             if use_idx else None),
    )


def grid_coords(grid_h: int, grid_w: int, normalized: bool = True) -> np.ndarray:
    """``N x 2`` (row, col) of every patch index.

    Normalized coordinates lie in [0, 1]; raw ones are 1-based grid units.
    """
    k = np.arange(grid_h * grid_w)
    i, j = (k // grid_w).astype(np.float64), (k % grid_w).astype(np.float64)
    if normalized:
        i = i / (grid_h - 1) if grid_h > 1 else np.zeros_like(i)
        j = j / (grid_w - 1) if grid_w > 1 else np.zeros_like(j)
        return np.stack([i, j], axis=1)
    return np.stack([i + 1.0, j + 1.0], axis=1)


def embed_patches(patches, state: EmbeddingState) -> Tensor:
    patches = T.as_tensor(patches)
    if patches.shape[-1] != state.proj.shape[0]:
        raise DimensionError(
            f"patch width {patches.shape[-1]} does not match projection input {state.proj.shape[0]}")
    return T.matmul(patches, state.proj)


def pe_row_index(mask, num_patches: int) -> np.ndarray:
    """Index into ``[E_pos; E_unk]`` for every token row (CLS first).

    ``mask`` is ``N`` cells or ``B x N``; masked cells point at the unknown row.
    """
    m = np.asarray(mask).reshape(-1, num_patches) if np.asarray(mask).ndim > 1 else np.asarray(mask).reshape(1, -1)
    if m.shape[1] != num_patches:
        raise DimensionError(f"mask has {m.shape[1]} cells for {num_patches} patches")
    rows = np.arange(1, num_patches + 1)
    idx = np.where(m.astype(bool), num_patches + 1, rows[None, :])
    idx = np.concatenate([np.zeros((m.shape[0], 1), dtype=idx.dtype), idx], axis=1)
    return idx if np.asarray(mask).ndim > 1 else idx[0]


def assemble_mjp_pe(state: EmbeddingState, mask) -> Tensor:
    """Position table with masked rows replaced by the shared unknown row.

    Output is ``(N+1) x D`` for an ``N``-cell mask or ``B x (N+1) x D`` for a
    batch of masks.  The [CLS] row is never replaced.
    """
    table = T.concat_rows([state.pos, state.unk])
    return T.take_rows(table, pe_row_index(mask, state.num_patches))


def _index_rows(state: EmbeddingState, mask) -> Tensor:
    # IDX variant: extra learnable rows added only at shuffled destinations
    n, d = state.num_patches, state.dim
    table = T.concat_rows([Tensor(np.zeros((1, d))), state.idx])
    m = np.asarray(mask).astype(bool)
    rows = np.where(m, np.arange(1, n + 1), 0)
    lead = np.zeros(rows.shape[:-1] + (1,), dtype=rows.dtype)
    return T.take_rows(table, np.concatenate([lead, rows], axis=-1))


def input_layer(patches, state: EmbeddingState, mask=None, mode: str = "standard",
                use_idx: bool = False) -> Tensor:
    """Token matrix ``[x_cls; patches @ E] + positions``.

    ``mode="standard"`` adds the plain position table; ``mode="mjp"`` adds the
    table with masked rows replaced by the unknown embedding.  Accepts a
    single ``N x F`` patch matrix or a ``B x N x F`` batch.
    """
    if mode not in ("standard", "mjp"):
        raise ContractError(f"unknown input mode {mode!r}")
    if mode == "mjp" and mask is None:
        raise ContractError("mjp input mode requires a mask")
    patches = T.as_tensor(patches)
    emb = embed_patches(patches, state)
    batched = emb.ndim == 3
    if batched:
        b = emb.shape[0]
        cls = T.take_rows(state.cls, np.zeros((b, 1), dtype=np.intp))
    else:
        cls = state.cls
    tokens = T.concat_rows([cls, emb])
    if mode == "mjp":
        m = np.asarray(mask)
        if batched and m.ndim == 1:
            m = np.broadcast_to(m.reshape(1, -1), (emb.shape[0], m.size))
        elif not batched:
            m = m.reshape(-1)
        pe = assemble_mjp_pe(state, m)
    else:
        pe = state.pos
        if batched:
            pe = T.take_rows(pe, np.broadcast_to(np.arange(pe.shape[0]), (emb.shape[0], pe.shape[0])))
    z = T.add(tokens, pe)
    if use_idx and mask is not None and state.idx is not None:
        m = np.asarray(mask)
        if batched and m.ndim == 1:
            m = np.broadcast_to(m.reshape(1, -1), (emb.shape[0], m.size))
        z = T.add(z, _index_rows(state, m.reshape(m.shape[0], -1) if batched else m.reshape(-1)))
    return z


# ---------------------------------------------------------------------------
# DAL


@dataclass
class DalRegressor:
    variant: str
    params: dict[str, Tensor] = field(default_factory=dict)


def init_regressor(variant: str, dim: int, rng: np.random.Generator, hidden: int = 64) -> DalRegressor:
    if variant not in DAL_VARIANTS:
        raise ContractError(f"unknown DAL variant {variant!r}")
    if variant == "pca":
        return DalRegressor("pca")
    if variant == "ln":
        return DalRegressor("ln", {
            "dal.w": Tensor(xavier_uniform(rng, dim, 2), requires_grad=True, name="dal.w"),
            "dal.b": Tensor(np.zeros(2), requires_grad=True, name="dal.b"),
        })
    return DalRegressor("nln", {
        "dal.w1": Tensor(xavier_uniform(rng, dim, hidden), requires_grad=True, name="dal.w1"),
        "dal.b1": Tensor(np.zeros(hidden), requires_grad=True, name="dal.b1"),
        "dal.w2": Tensor(xavier_uniform(rng, hidden, hidden), requires_grad=True, name="dal.w2"),
        "dal.b2": Tensor(np.zeros(hidden), requires_grad=True, name="dal.b2"),
        "dal.w3": Tensor(xavier_uniform(rng, hidden, 2), requires_grad=True, name="dal.w3"),
        "dal.b3": Tensor(np.zeros(2), requires_grad=True, name="dal.b3"),
    })


def pca_alignment(rows: np.ndarray, targets: np.ndarray):
    """Top-2 principal directions of ``rows`` followed by the least-squares
    affine map onto ``targets``.  Returns ``(M, c)`` with prediction
    ``rows @ M + c``."""
    centered = rows - rows.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    basis = vt[:2].T
    proj = centered @ basis
    design = np.hstack([proj, np.ones((proj.shape[0], 1))])
    coef, *_ = np.linalg.lstsq(design, targets, rcond=None)
    a, c = coef[:2], coef[2]
    mat = basis @ a
    return mat, c - rows.mean(axis=0) @ mat


def dal_predict(pe_rows, reg: DalRegressor, targets=None) -> Tensor:
    """Predicted grid coordinates (``M x 2``) for position rows.

    The PCA variant has no parameters: the principal basis and the affine
    alignment to ``targets`` are recomputed on every call and held constant,
    so gradients reach the position rows only.
    """
    pe_rows = T.as_tensor(pe_rows)
    m = pe_rows.shape[0]
    if m < 1:
        raise ContractError("dal_predict needs at least one row")
    if reg.variant == "pca":
        if m < 3:
            raise ContractError(f"PCA alignment needs at least 3 rows, got {m}")
        if targets is None:
            raise ContractError("PCA alignment needs target coordinates")
        mat, c = pca_alignment(pe_rows.data, np.asarray(targets, dtype=np.float64))
        return T.add(T.matmul(pe_rows, Tensor(mat)), Tensor(c))
    p = reg.params
    if reg.variant == "ln":
        return T.add(T.matmul(pe_rows, p["dal.w"]), p["dal.b"])
    h = T.gelu(T.add(T.matmul(pe_rows, p["dal.w1"]), p["dal.b1"]))
    h = T.gelu(T.add(T.matmul(h, p["dal.w2"]), p["dal.b2"]))
    return T.add(T.matmul(h, p["dal.w3"]), p["dal.b3"])


def _zero_loss(reason: str) -> Tensor:
    warnings.warn(reason, RuntimeWarning, stacklevel=3)
    return Tensor(0.0)


def dal_loss(state: EmbeddingState, reg: DalRegressor, mask, coords: np.ndarray,
             all_rows: bool = False) -> Tensor:
    """Mean l1 distance between predicted and true coordinates over the
    unmasked patch rows of the position table (the [CLS] row never counts)."""
    n = state.num_patches
    m = np.asarray(mask).reshape(-1).astype(bool)
    if m.size != n:
        raise DimensionError(f"mask has {m.size} cells for {n} patches")
    keep = np.arange(n) if all_rows else np.flatnonzero(~m)
    if keep.size == 0:
        return _zero_loss("DAL loss over an empty unmasked set is defined as 0")
    rows = T.take_rows(state.pos, keep + 1)
    target = np.asarray(coords)[keep]
    pred = dal_predict(rows, reg, target)
    return T.l1_loss(pred, Tensor(target))


def dal_loss_batch(state: EmbeddingState, reg: DalRegressor, masks: np.ndarray,
                   coords: np.ndarray, all_rows: bool = False) -> Tensor:
    """Average of ``dal_loss`` over a batch of masks, sharing one forward
    pass through the regressor for the learnable variants."""
    masks = np.asarray(masks).reshape(len(masks), -1).astype(bool)
    if reg.variant == "pca":
        losses = [dal_loss(state, reg, m, coords, all_rows) for m in masks
                  if all_rows or (~m).sum() >= 3]
        if not losses:
            return _zero_loss("no sample had enough unmasked rows for PCA alignment")
        total = losses[0]
        for extra in losses[1:]:
            total = T.add(total, extra)
        return T.scale(total, 1.0 / len(losses))
    n = state.num_patches
    keep = np.ones_like(masks) if all_rows else ~masks
    counts = keep.sum(axis=1)
    valid = counts > 0
    if not valid.any():
        return _zero_loss("DAL loss over an empty unmasked set is defined as 0")
    row_w = (keep[valid] / counts[valid, None]).sum(axis=0)
    rows = T.slice_rows(state.pos, 1, n + 1)
    pred = dal_predict(rows, reg)
    weights = np.repeat(row_w[:, None], 2, axis=1)
    if not weights.any():
        return _zero_loss("DAL loss over an empty unmasked set is defined as 0")
    return T.l1_loss(pred, Tensor(np.asarray(coords)), weights=weights)


def total_loss(ce: Tensor, dal: Tensor, lam: float = 0.01) -> Tensor:
    return T.add(ce, T.scale(dal, lam))
