"""Training and evaluation loops driven by a :class:`RunConfig`."""

from __future__ import annotations

import logging
import math

import numpy as np

from . import tensor as T
from .config import RunConfig
from .data import Dataset
from .jigsaw import (STREAM_BATCH, STREAM_EVAL, STREAM_MASK, STREAM_PERM, STREAM_PIXEL,
                     apply_permutation, blockwise_mask, jigsaw_permutation, make_rng, patchify_batch)
from .metrics import consistency, summarize, top1
from .vit import ModelSnapshot, StepOptions, ViTConfig, init_model, model_forward, no_decay_names, train_step

log = logging.getLogger(__name__)


def model_config(run: RunConfig, image_shape) -> ViTConfig:
    h, w, c = image_shape
    return ViTConfig(img_h=h, img_w=w, channels=c, patch=run.patch, dim=run.dim, depth=run.depth,
                     heads=run.heads, mlp_ratio=run.mlp_ratio, classes=run.classes, use_pe=run.pe,
                     use_idx=run.idx, dal=run.dal, dal_hidden=run.dal_hidden)


def step_options(run: RunConfig) -> StepOptions:
    return StepOptions(gamma=run.train_gamma, lam=run.lam, unk=run.unk, spp=run.spp,
                       dal_all_rows=run.dal_all_rows, normalized_coords=run.dal_coords == "normalized",
                       min_block_area=run.min_block_area)


def train(run: RunConfig, data: Dataset, report=None, snap: ModelSnapshot | None = None,
          opt: T.AdamWState | None = None, until_epoch: int | None = None):
    """Train from scratch (or resume) and return ``(snapshot, optimizer, history)``.

    Every iteration draws fresh masks and permutations from streams keyed by
    ``(seed, iteration)``; the epoch order comes from ``(seed, epoch)``.  A
    resumed run picks up at the epoch implied by the optimizer step, so
    stopping at ``until_epoch`` and resuming reproduces an uninterrupted run.
    """
    if snap is None:
        snap = init_model(model_config(run, data.shape), run.seed)
    if opt is None:
        opt = T.init_adamw(snap.trainable(), lr=run.lr, weight_decay=run.weight_decay,
                           betas=(run.beta1, run.beta2), no_decay=no_decay_names(snap.params))
    opts = step_options(run)
    n = len(data)
    per_epoch = max(1, math.ceil(n / run.batch_size))
    total = per_epoch * run.epochs
    warm = per_epoch * run.warmup_epochs
    history = []
    it = opt.step
    stop = run.epochs if until_epoch is None else min(until_epoch, run.epochs)
    for epoch in range(it // per_epoch, stop):
        order = make_rng(run.seed, STREAM_BATCH, epoch).permutation(n)
        sums = {"total": 0.0, "ce": 0.0, "dal": 0.0, "acc": 0.0}
        for b in range(per_epoch):
            idx = order[b * run.batch_size:(b + 1) * run.batch_size]
            if idx.size == 0:
                continue
            lr = T.cosine_lr(it, total, run.lr, warm, run.min_lr)
            out = train_step(snap, opt, data.images[idx], data.labels[idx], opts,
                             make_rng(run.seed, STREAM_MASK, it), make_rng(run.seed, STREAM_PERM, it),
                             make_rng(run.seed, STREAM_PIXEL, it), lr=lr)
            for k in sums:
                sums[k] += out[k] * idx.size
            it += 1
        row = {k: v / n for k, v in sums.items()}
        row["epoch"] = epoch
        history.append(row)
        log.info("epoch %d loss %.4f ce %.4f dal %.4f acc %.3f", epoch, row["total"], row["ce"],
                 row["dal"], row["acc"])
        if report is not None:
            for k in ("total", "ce", "dal", "acc"):
                report.emit(f"train_{k}", row[k], epoch=epoch)
    return snap, opt, history


def shuffled_views(images: np.ndarray, patch: int, gamma: float, seed: int, min_block_area: int = 4):
    """Block-wise jigsaw counterpart of every image.

    Image ``i`` uses its own streams keyed by ``(seed, i)``, so the shuffle
    does not depend on batching.  Returns ``(clean, shuffled, masks, perms)``
    with patches as ``B x N x F``.
    """
    x = patchify_batch(np.asarray(images, dtype=np.float64), patch)
    b, n = x.shape[:2]
    gh, gw = images.shape[1] // patch, images.shape[2] // patch
    shuffled = x.copy()
    masks = np.zeros((b, n), dtype=np.int8)
    perms = np.tile(np.arange(n), (b, 1))
    for i in range(b):
        m = blockwise_mask(gh, gw, gamma, make_rng(seed, STREAM_EVAL, 0, i), min_block_area=min_block_area)
        masks[i] = m.reshape(-1)
        perms[i] = jigsaw_permutation(m, make_rng(seed, STREAM_EVAL, 1, i))
        shuffled[i] = apply_permutation(x[i], perms[i])
    return x, shuffled, masks, perms


def _forward_batches(snap, patches, mode, masks=None, batch_size=256):
    logits, cls = [], []
    with T.no_grad():
        for s in range(0, len(patches), batch_size):
            m = None if masks is None else masks[s:s + batch_size]
            res = model_forward(patches[s:s + batch_size], snap, mode=mode, mask=m)
            logits.append(res.logits.data)
            cls.append(res.cls_embed.data)
    return np.concatenate(logits), np.concatenate(cls)


def evaluate(snap: ModelSnapshot, data: Dataset, gamma_evals, eval_mode: str = "oblivious",
             seed: int = 0, min_block_area: int = 4, report=None) -> list[dict]:
    """Top-1 on clean images plus Diff. Norm. and Consistency against the
    jigsaw counterpart at each ``gamma_eval``."""
    if eval_mode not in ("oblivious", "aware"):
        raise ValueError(f"eval_mode must be oblivious or aware, got {eval_mode!r}")
    patch = snap.config.patch
    clean = patchify_batch(data.images, patch)
    base_logits, base_cls = _forward_batches(snap, clean, "standard")
    acc = top1(base_logits, data.labels)
    rows = []
    for g in gamma_evals:
        _, shuf, masks, _ = shuffled_views(data.images, patch, g, seed, min_block_area)
        logits, cls = _forward_batches(snap, shuf, eval_mode, masks if eval_mode == "aware" else None)
        d2 = np.sum((base_cls - cls) ** 2, axis=1)
        dn, dn_std = summarize(d2)
        dl, dl_std = summarize(np.sqrt(d2))
        row = {"gamma_eval": g, "eval_mode": eval_mode, "top1": acc,
               "top1_shuffled": top1(logits, data.labels),
               "consistency": consistency(base_logits, logits),
               "diff_norm": dn, "diff_norm_std": dn_std, "diff_norm_l2": dl, "diff_norm_l2_std": dl_std,
               "mask_ratio": float(masks.mean())}
        rows.append(row)
        if report is not None:
            extra = {"gamma_eval": g, "eval_mode": eval_mode}
            report.emit("top1", acc, **extra)
            report.emit("top1_shuffled", row["top1_shuffled"], **extra)
            report.emit("consistency", row["consistency"], **extra)
            report.emit("diff_norm", dn, dn_std, **extra)
            report.emit("diff_norm_l2", dl, dl_std, **extra)
    return rows
