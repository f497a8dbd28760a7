"""Toy pre-norm Vision Transformer on top of :mod:`mjplab.tensor`."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .embedding import (DalRegressor, EmbeddingState, dal_loss_batch, grid_coords, init_embedding,
                        init_regressor, input_layer, total_loss, trunc_normal, xavier_uniform)
from .errors import ContractError, DimensionError
from .jigsaw import apply_permutation, blockwise_mask, jigsaw_permutation, patchify_batch, pixel_shuffle
from .tensor import Tensor

MODES = ("standard", "aware", "oblivious")


@dataclass
class ViTConfig:
    img_h: int = 32
    img_w: int = 32
    channels: int = 3
    patch: int = 4
    dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    classes: int = 4
    use_pe: bool = True
    use_idx: bool = False
    dal: str = "none"
    dal_hidden: int = 64

    def __post_init__(self):
        if self.dim % self.heads:
            raise DimensionError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.img_h % self.patch or self.img_w % self.patch:
            raise DimensionError(f"image {self.img_h}x{self.img_w} not divisible by patch {self.patch}")

    @property
    def grid(self) -> tuple[int, int]:
        return self.img_h // self.patch, self.img_w // self.patch

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ModelSnapshot:
    config: ViTConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    @property
    def embedding(self) -> EmbeddingState:
        p = self.params
        return EmbeddingState(p["embed.proj"], p["embed.pos"], p["embed.unk"], p["embed.cls"],
                              p.get("embed.idx"))

    @property
    def regressor(self) -> DalRegressor | None:
        if self.config.dal == "none":
            return None
        return DalRegressor(self.config.dal, {k: v for k, v in self.params.items() if k.startswith("dal.")})

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if v.requires_grad}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.trainable().values()))


def no_decay_names(params) -> set[str]:
    """Biases, norm gains, position/class/unknown/index tables skip weight decay."""
    skip = set()
    for name, p in params.items():
        if p.data.ndim == 1 or name.startswith("embed.") and name != "embed.proj":
            skip.add(name)
    return skip


def init_model(config: ViTConfig, seed: int) -> ModelSnapshot:
    from .jigsaw import STREAM_INIT, make_rng

    rng = make_rng(seed, STREAM_INIT)
    d, hidden = config.dim, config.dim * config.mlp_ratio
    emb = init_embedding(rng, config.patch_dim, config.num_patches, d,
                         use_pe=config.use_pe, use_idx=config.use_idx)
    params: dict[str, Tensor] = {"embed.proj": emb.proj, "embed.pos": emb.pos,
                                 "embed.unk": emb.unk, "embed.cls": emb.cls}
    if emb.idx is not None:
        params["embed.idx"] = emb.idx

    def lin(name, fan_in, fan_out):
        params[name + ".w"] = Tensor(xavier_uniform(rng, fan_in, fan_out), requires_grad=True, name=name + ".w")
        params[name + ".b"] = Tensor(np.zeros(fan_out), requires_grad=True, name=name + ".b")

    def norm(name):
        params[name + ".g"] = Tensor(np.ones(d), requires_grad=True, name=name + ".g")
        params[name + ".b"] = Tensor(np.zeros(d), requires_grad=True, name=name + ".b")

    for i in range(config.depth):
        pre = f"blocks.{i}"
        norm(pre + ".ln1")
        for nm in ("q", "k", "v", "o"):
            lin(f"{pre}.attn.{nm}", d, d)
        norm(pre + ".ln2")
        lin(pre + ".mlp.fc1", d, hidden)
        lin(pre + ".mlp.fc2", hidden, d)
    norm("norm")
    params["head.w"] = Tensor(trunc_normal(rng, (d, config.classes)), requires_grad=True, name="head.w")
    params["head.b"] = Tensor(np.zeros(config.classes), requires_grad=True, name="head.b")
    if config.dal != "none":
        reg = init_regressor(config.dal, d, rng, hidden=config.dal_hidden)
        params.update(reg.params)
    return ModelSnapshot(config, params)


def _linear(x, params, name):
    return T.add(T.matmul(x, params[name + ".w"]), params[name + ".b"])


def msa_forward(z, params: dict[str, Tensor], prefix: str, heads: int, capture: dict | None = None):
    """Multi-head self-attention over the token rows of ``z``.

    Returns ``(output, attention)`` where attention is ``[...] x heads x T x T``.
    When ``capture`` is a dict, the Q/K/V activations are stored in it with
    their gradients retained.
    """
    z = T.as_tensor(z)
    d = z.shape[-1]
    if d % heads:
        raise DimensionError(f"width {d} not divisible by {heads} heads")
    hd = d // heads
    q = _linear(z, params, prefix + ".q")
    k = _linear(z, params, prefix + ".k")
    v = _linear(z, params, prefix + ".v")
    if capture is not None:
        capture.update(input=z, q=q.retain_grad(), k=k.retain_grad(), v=v.retain_grad())
    lead = z.shape[:-2]
    t = z.shape[-2]
    nl = len(lead)
    split_axes = tuple(range(nl)) + (nl + 1, nl, nl + 2)

    def split(x):
        return T.permute(T.reshape(x, lead + (t, heads, hd)), split_axes)

    qh, kh, vh = split(q), split(k), split(v)
    att = T.softmax_rows(T.scale(T.matmul(qh, T.transpose(kh)), 1.0 / math.sqrt(hd)))
    out = T.reshape(T.permute(T.matmul(att, vh), split_axes), lead + (t, d))
    return _linear(out, params, prefix + ".o"), att


def _block(z, params, i, heads, capture=None):
    pre = f"blocks.{i}"
    u = T.layer_norm(z, params[pre + ".ln1.g"], params[pre + ".ln1.b"])
    a, att = msa_forward(u, params, pre + ".attn", heads, capture)
    z = T.add(z, a)
    h = T.layer_norm(z, params[pre + ".ln2.g"], params[pre + ".ln2.b"])
    h = _linear(T.gelu(_linear(h, params, pre + ".mlp.fc1")), params, pre + ".mlp.fc2")
    return T.add(z, h), att


@dataclass
class ForwardResult:
    logits: Tensor
    cls_embed: Tensor
    z0: Tensor
    attention: list = field(default_factory=list)


def model_forward(patches, snap: ModelSnapshot, mode: str = "standard", mask=None, perm=None,
                  keep_attention: bool = False, capture: dict | None = None) -> ForwardResult:
    """Forward pass over ``N x F`` patches or a ``B x N x F`` batch.

    ``standard`` uses the patches as given with the plain position table.
    ``aware`` expects shuffled patches plus their mask and uses the table with
    masked rows set to the unknown embedding.  ``oblivious`` feeds shuffled
    patches with the plain table.  If ``perm`` is given, the patches are
    shuffled by it first (destination of each source row, or one per sample).
    """
    if mode not in MODES:
        raise ContractError(f"unknown mode {mode!r}; expected one of {MODES}")
    if mode == "aware" and mask is None:
        raise ContractError("aware mode requires the jigsaw mask")
    x = np.asarray(patches.data if isinstance(patches, Tensor) else patches, dtype=np.float64)
    if perm is not None:
        perm = np.asarray(perm)
        if perm.ndim == 1:
            x = apply_permutation(x, perm)
        else:
            x = np.stack([apply_permutation(xi, pi) for xi, pi in zip(x, perm)])
    cfg = snap.config
    emb = snap.embedding
    flat_mask = None if mask is None else np.asarray(mask).reshape(*np.asarray(x).shape[:-2], -1)
    z0 = input_layer(x, emb, flat_mask if mode == "aware" else None,
                     mode="mjp" if mode == "aware" else "standard",
                     use_idx=cfg.use_idx and mode == "aware")
    if capture is not None:
        capture["z0"] = z0.retain_grad()
    z = z0
    maps = []
    for i in range(cfg.depth):
        z, att = _block(z, snap.params, i, cfg.heads, capture if (capture is not None and i == 0) else None)
        if keep_attention:
            maps.append(att.data)
    z = T.layer_norm(z, snap.params["norm.g"], snap.params["norm.b"])
    cls = T.reshape(T.slice_rows(z, 0, 1), z.shape[:-2] + (cfg.dim,))
    logits = T.add(T.matmul(T.reshape(cls, (-1, cfg.dim)), snap.params["head.w"]), snap.params["head.b"])
    if z.ndim == 2:
        logits = T.reshape(logits, (cfg.classes,))
    return ForwardResult(logits, cls, z0, maps)


# ---------------------------------------------------------------------------
# training step


@dataclass
class StepOptions:
    """How one training batch is transformed before the forward pass."""

    gamma: float = 0.0
    lam: float = 0.01
    unk: bool = True          # masked rows get the unknown embedding
    spp: bool = False         # additionally permute pixels inside every patch
    dal_all_rows: bool = False
    normalized_coords: bool = True
    min_block_area: int = 4


@dataclass
class PreparedBatch:
    patches: np.ndarray
    masks: np.ndarray
    perms: np.ndarray


def prepare_batch(images: np.ndarray, cfg: ViTConfig, opts: StepOptions, rng_mask, rng_perm,
                  rng_pixel=None) -> PreparedBatch:
    """Fresh block-wise mask and jigsaw permutation for every sample."""
    x = patchify_batch(np.asarray(images, dtype=np.float64), cfg.patch)
    gh, gw = cfg.grid
    b, n = x.shape[0], x.shape[1]
    masks = np.zeros((b, n), dtype=np.int8)
    perms = np.tile(np.arange(n), (b, 1))
    if opts.gamma > 0:
        for s in range(b):
            m = blockwise_mask(gh, gw, opts.gamma, rng_mask, min_block_area=opts.min_block_area)
            masks[s] = m.reshape(-1)
            perms[s] = jigsaw_permutation(m, rng_perm)
            x[s] = apply_permutation(x[s], perms[s])
    if opts.spp:
        for s in range(b):
            x[s] = pixel_shuffle(x[s], cfg.patch, cfg.channels, rng_pixel)
    return PreparedBatch(x, masks, perms)


def compute_losses(snap: ModelSnapshot, batch: PreparedBatch, labels, opts: StepOptions):
    """Forward + loss assembly; returns ``(total, ce, dal, logits)`` tensors."""
    cfg = snap.config
    mode = "aware" if (opts.unk and batch.masks.any()) else "standard"
    res = model_forward(batch.patches, snap, mode=mode, mask=batch.masks if mode == "aware" else None)
    ce = T.cross_entropy(res.logits, labels)
    reg = snap.regressor
    if reg is None:
        dal = Tensor(0.0)
    else:
        gh, gw = cfg.grid
        coords = grid_coords(gh, gw, normalized=opts.normalized_coords)
        dal = dal_loss_batch(snap.embedding, reg, batch.masks, coords, all_rows=opts.dal_all_rows)
    return total_loss(ce, dal, opts.lam), ce, dal, res.logits


def train_step(snap: ModelSnapshot, opt_state: T.AdamWState, images, labels, opts: StepOptions,
               rng_mask, rng_perm, rng_pixel=None, lr: float | None = None) -> dict:
    """One optimizer step on a batch of ``B x H x W x C`` images.

    Returns the loss breakdown; ``total == ce + lam * dal`` exactly.
    """
    if not 0.0 <= opts.gamma <= 1.0:
        raise ContractError(f"gamma must lie in [0, 1], got {opts.gamma}")
    batch = prepare_batch(images, snap.config, opts, rng_mask, rng_perm, rng_pixel)
    snap.zero_grad()
    total, ce, dal, logits = compute_losses(snap, batch, labels, opts)
    total.backward()
    if lr is not None:
        opt_state.lr = lr
    params = snap.trainable()
    T.adamw_step(params, {k: p.grad for k, p in params.items()}, opt_state)
    acc = float((np.argmax(logits.data, axis=1) == np.asarray(labels)).mean())
    return {"total": total.item(), "ce": ce.item(), "dal": dal.item(), "acc": acc,
            "mask_ratio": float(batch.masks.mean())}
