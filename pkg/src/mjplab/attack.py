"""Closed-form gradient inversion against the toy ViT (single image).

The first transformer block computes ``u = LN1(z0)`` and then
``Q = u Wq + bq`` (likewise K, V).  For one image the weight gradients are
outer products with ``u``::

    dl/dWq = u^T dl/dQ,   dl/dWk = u^T dl/dK,   dl/dWv = u^T dl/dV

so with ``G = [dl/dQ  dl/dK  dl/dV]`` (T x 3D) the unknown ``u`` solves the
linear system ``G^T u = [dl/dWq  dl/dWk  dl/dWv]^T``, uniquely once ``G`` has
full row rank (needs ``3D >= T`` and at least one block after the first: a
lone block feeds only its [CLS] row to the head, which collapses the rank).
Multiplying by the weights gives the
equivalent form ``(dl/du)^T u = sum_x Wx (dl/dWx)^T`` with
``dl/du = sum_x dl/dX Wx^T``.

``z0`` itself enters through the layer norm, so each token row is only known
up to its mean and scale.  The attacker pins both using the embedding model
``z0_t = x_t E + Epos_t`` with *their* copy of the position table: per row,
``g * (x_t E + Epos_t - mu) = s * (u_t - b)`` is linear in ``(x_t, mu, s)``
and overdetermined when ``D >= P*P*C + 2``.  Finally the patches are read
off as ``(z0 - Epos) pinv(E)``.  When the input actually carried the unknown
embedding at shuffled rows, the attacker's ``Epos`` is wrong there and the
recovery degrades; that is the effect being measured.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError
from .jigsaw import STREAM_EVAL, apply_permutation, blockwise_mask, jigsaw_permutation, make_rng, patchify, unpatchify
from .metrics import image_scores, summarize
from .vit import ModelSnapshot, model_forward

PINV_CUTOFF = 1e-10
SCENARIOS = ("a", "b", "c")


@dataclass
class GradientCapture:
    snapshot: ModelSnapshot
    mode: str
    patches: np.ndarray            # what the model was fed (possibly shuffled)
    mask: np.ndarray | None
    label: int
    param_grads: dict[str, np.ndarray]
    act_grads: dict[str, np.ndarray]    # dl/dQ, dl/dK, dl/dV, dl/dz0
    z0: np.ndarray                 # exact input embedding, for oracle checks only
    u: np.ndarray                  # exact first-block attention input, for oracle checks only
    loss: float

    @property
    def pos_grad(self) -> np.ndarray:
        return self.param_grads["embed.pos"]


@dataclass
class AttackResult:
    patches: np.ndarray            # raw recovered patches (unclipped)
    image: np.ndarray              # raw recovered image (unclipped)
    z0: np.ndarray
    u: np.ndarray
    sigma_min: float
    rank: int
    ill_conditioned: bool
    scores: dict = field(default_factory=dict)


def capture_gradients(snap: ModelSnapshot, image: np.ndarray, label: int, mode: str = "standard",
                      mask=None, perm=None) -> GradientCapture:
    """Forward/backward on one ``H x W x C`` image and keep what the attack needs."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ContractError(f"attack works on a single H x W x C image, got shape {image.shape}")
    cfg = snap.config
    x = patchify(image, cfg.patch)
    if perm is not None:
        x = apply_permutation(x, np.asarray(perm))
    if mode == "aware" and mask is None:
        raise ContractError("aware capture needs the mask")
    hooks: dict = {}
    snap.zero_grad()
    res = model_forward(x, snap, mode=mode, mask=mask if mode == "aware" else None, capture=hooks)
    loss = T.cross_entropy(T.reshape(res.logits, (1, cfg.classes)), [int(label)])
    loss.backward()
    grads = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
             for k, p in snap.params.items()}
    acts = {"q": hooks["q"].grad.copy(), "k": hooks["k"].grad.copy(), "v": hooks["v"].grad.copy(),
            "z0": hooks["z0"].grad.copy()}
    snap.zero_grad()
    return GradientCapture(snap, mode, x, None if mask is None else np.asarray(mask).reshape(-1),
                           int(label), grads, acts, hooks["z0"].data.copy(), hooks["input"].data.copy(),
                           loss.item())


def _first_block(cap: GradientCapture):
    p = cap.snapshot.params
    w = {x: p[f"blocks.0.attn.{x}.w"].data for x in "qkv"}
    dw = {x: cap.param_grads[f"blocks.0.attn.{x}.w"] for x in "qkv"}
    return w, dw


def attention_system(cap: GradientCapture):
    """Coefficient ``G`` (T x 3D) and right-hand side (D x 3D) with ``u^T G = rhs``."""
    _, dw = _first_block(cap)
    coef = np.hstack([cap.act_grads[x] for x in "qkv"])
    rhs = np.hstack([dw[x] for x in "qkv"])
    return coef, rhs


def identity_residual(cap: GradientCapture, u: np.ndarray | None = None) -> float:
    """Relative residual of ``u^T G = [dWq dWk dWv]`` at the true (or given) ``u``."""
    coef, rhs = attention_system(cap)
    u = cap.u if u is None else u
    return float(np.linalg.norm(u.T @ coef - rhs) / max(np.linalg.norm(rhs), 1e-300))


def april_residual(cap: GradientCapture, u: np.ndarray | None = None) -> float:
    """Relative residual of ``(dl/du)^T u = sum_x Wx (dl/dWx)^T``."""
    w, dw = _first_block(cap)
    u = cap.u if u is None else u
    du = sum(cap.act_grads[x] @ w[x].T for x in "qkv")
    rhs = sum(w[x] @ dw[x].T for x in "qkv")
    return float(np.linalg.norm(du.T @ u - rhs) / max(np.linalg.norm(rhs), 1e-300))


def _denormalize(u: np.ndarray, gain: np.ndarray, bias: np.ndarray, proj: np.ndarray,
                 pos: np.ndarray) -> np.ndarray:
    """Invert the first layer norm row by row against ``z_t = x_t E + pos_t``."""
    t, d = u.shape
    f = proj.shape[0]
    z = np.empty_like(u)
    scaled_proj = (proj * gain[None, :]).T          # D x F
    for r in range(t):
        a = np.hstack([scaled_proj, -gain[:, None], -(u[r] - bias)[:, None]])
        sol, *_ = np.linalg.lstsq(a, -gain * pos[r], rcond=None)
        mu, s = sol[f], sol[f + 1]
        z[r] = mu + s * (u[r] - bias) / np.where(gain == 0, 1.0, gain)
        if np.any(gain == 0):
            # coordinates with zero gain carry no information; take them from the model
            zero = gain == 0
            z[r, zero] = (sol[:f] @ proj + pos[r])[zero]
    return z


def april_recover(cap: GradientCapture, attacker_pos: np.ndarray | None = None) -> AttackResult:
    """Recover the fed patches from the captured gradients.

    ``attacker_pos`` defaults to the snapshot's own position table: the
    attacker knows the parameters but not the jigsaw mask.
    """
    snap = cap.snapshot
    cfg = snap.config
    p = snap.params
    pos = p["embed.pos"].data if attacker_pos is None else np.asarray(attacker_pos)
    proj = p["embed.proj"].data
    coef, rhs = attention_system(cap)
    sv = np.linalg.svd(coef, compute_uv=False)
    cutoff = PINV_CUTOFF * sv[0] if sv.size and sv[0] > 0 else 0.0
    rank = int(np.sum(sv > cutoff))
    u = np.linalg.pinv(coef.T, rcond=PINV_CUTOFF) @ rhs.T
    z0 = _denormalize(u, p["blocks.0.ln1.g"].data, p["blocks.0.ln1.b"].data, proj, pos)
    patches = (z0[1:] - pos[1:]) @ np.linalg.pinv(proj, rcond=PINV_CUTOFF)
    image = unpatchify(patches, cfg.img_h, cfg.img_w, cfg.channels, cfg.patch)
    ill = rank < coef.shape[0] or cfg.dim < cfg.patch_dim + 2
    return AttackResult(patches, image, z0, u, float(sv[-1]) if sv.size else 0.0, rank, ill)


def pe_mismatch(snap: ModelSnapshot, mask) -> np.ndarray:
    """Rows by which the aware-mode input embedding differs from the attacker's
    model ``x E + Epos`` of the same shuffled patches: ``Eunk - Epos_i`` on
    masked rows, zero elsewhere (CLS row included, always zero)."""
    pos = snap.params["embed.pos"].data
    unk = snap.params["embed.unk"].data[0]
    m = np.asarray(mask).reshape(-1).astype(bool)
    out = np.zeros_like(pos)
    out[1:][m] = unk - pos[1:][m]
    return out


def evaluate_attack(scenario: str, images: np.ndarray, snap: ModelSnapshot, gamma: float, seed: int = 0,
                    labels=None, no_unk: bool = False, min_block_area: int = 4):
    """Run the attack over an image set and score recoveries.

    (a) gradients of the clean image, compared with the clean image;
    (b) gradients of the jigsaw image, compared with the jigsaw image;
    (c) gradients of the jigsaw image, compared with the clean image.
    Jigsaw inputs carry the unknown embedding on shuffled rows unless
    ``no_unk`` (then they keep the ordinary table).
    Returns ``(summary, per_image)``.
    """
    if scenario not in SCENARIOS:
        raise ContractError(f"scenario must be one of {SCENARIOS}, got {scenario!r}")
    cfg = snap.config
    gh, gw = cfg.grid
    per_image = []
    for i, img in enumerate(np.asarray(images, dtype=np.float64)):
        x = patchify(img, cfg.patch)
        label = int(labels[i]) if labels is not None else 0
        if scenario == "a":
            cap = capture_gradients(snap, img, label, "standard")
            reference = img
            ratio = 0.0
        else:
            mask = blockwise_mask(gh, gw, gamma, make_rng(seed, STREAM_EVAL, 0, i), min_block_area=min_block_area)
            perm = jigsaw_permutation(mask, make_rng(seed, STREAM_EVAL, 1, i))
            mode = "oblivious" if no_unk else "aware"
            cap = capture_gradients(snap, img, label, mode, mask=mask.reshape(-1), perm=perm)
            shuffled = unpatchify(apply_permutation(x, perm), cfg.img_h, cfg.img_w, cfg.channels, cfg.patch)
            reference = shuffled if scenario == "b" else img
            ratio = float(mask.mean())
        res = april_recover(cap)
        res.scores = image_scores(res.image, reference)
        per_image.append({"index": i, "mask_ratio": ratio, "sigma_min": res.sigma_min,
                          "ill_conditioned": res.ill_conditioned, "result": res, **res.scores})
    summary = {}
    for key in ("mse", "psnr", "ssim", "fft2d_cos"):
        mean, std = summarize(r[key] for r in per_image)
        summary[key] = mean
        summary[key + "_std"] = std
    summary["scenario"] = scenario
    summary["gamma"] = gamma
    summary["count"] = len(per_image)
    return summary, per_image
