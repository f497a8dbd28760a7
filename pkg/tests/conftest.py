import numpy as np
import pytest

from mjplab import tensor as T
from mjplab.vit import ViTConfig, init_model

FD_STEP = 1e-5
FD_RTOL = 1e-6


def fd_check(build, arrays, seed=0):
    """Compare backward against central differences for every input array.

    ``build(*tensors)`` returns a tensor of any shape; it is contracted with a
    fixed random weight so the checked function is a generic scalar.
    Returns the worst relative error.
    """
    tensors = [T.Tensor(a, requires_grad=True) for a in arrays]
    out = build(*tensors)
    w = np.random.default_rng(seed).normal(size=out.shape)
    loss = T.sum(T.mul(out, T.Tensor(w))) if out.ndim else out
    loss.backward()

    def f():
        o = build(*[T.Tensor(t.data) for t in tensors]).data
        return float(np.sum(o * w)) if o.ndim else float(o)

    worst = 0.0
    for t in tensors:
        num = T.finite_difference_grad(f, t.data, FD_STEP)
        worst = max(worst, T.relative_error(t.grad, num))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def attack_config(**kw):
    # D >= P*P*C + 2 and 3D >= N + 1, so the inversion is fully determined
    base = dict(img_h=8, img_w=8, channels=3, patch=2, dim=16, depth=2, heads=2, mlp_ratio=2, classes=4)
    base.update(kw)
    return ViTConfig(**base)


def tiny_config(**kw):
    base = dict(img_h=8, img_w=8, channels=3, patch=4, dim=8, depth=2, heads=2, mlp_ratio=2, classes=3)
    base.update(kw)
    return ViTConfig(**base)


def randomize_unk(snap, seed=0, std=0.5):
    """Fresh models start with small tables; spread them so effects are visible."""
    r = np.random.default_rng(seed)
    for name in ("embed.pos", "embed.unk"):
        p = snap.params[name]
        p.data[...] = r.normal(0.0, std, p.shape)
    return snap


@pytest.fixture
def attack_snapshot():
    return randomize_unk(init_model(attack_config(), 3), 7, 0.1)


def model_fd_case(seed, entries=40):
    """Finite-difference check of the full training loss (aware mode, NLN DAL).

    Returns ``(directional_error, entrywise_error)``: one check along a random
    direction over every parameter, one over a random sample of entries.
    """
    from mjplab.embedding import dal_loss_batch, grid_coords, total_loss
    from mjplab.jigsaw import blockwise_mask, jigsaw_permutation, make_rng, patchify_batch, apply_permutation
    from mjplab.vit import model_forward

    r = np.random.default_rng(seed)
    cfg = tiny_config(dal="nln", dal_hidden=6, img_h=8, img_w=12)
    snap = randomize_unk(init_model(cfg, seed), seed, 0.3)
    imgs = r.random((2, cfg.img_h, cfg.img_w, cfg.channels))
    labels = r.integers(0, cfg.classes, size=2)
    gh, gw = cfg.grid
    x = patchify_batch(imgs, cfg.patch)
    masks = np.zeros((2, gh * gw), dtype=np.int8)
    for i in range(2):
        m = blockwise_mask(gh, gw, 0.4, make_rng(seed, 1, i), min_block_area=1)
        masks[i] = m.reshape(-1)
        x[i] = apply_permutation(x[i], jigsaw_permutation(m, make_rng(seed, 2, i)))
    coords = grid_coords(gh, gw)

    def loss_fn():
        res = model_forward(x, snap, mode="aware", mask=masks)
        ce = T.cross_entropy(res.logits, labels)
        return total_loss(ce, dal_loss_batch(snap.embedding, snap.regressor, masks, coords))

    params = snap.trainable()
    snap.zero_grad()
    loss_fn().backward()
    grads = {k: p.grad.copy() for k, p in params.items()}

    direction = {k: r.normal(size=p.shape) for k, p in params.items()}
    analytic = sum(float(np.sum(grads[k] * direction[k])) for k in params)

    def shifted(t):
        for k, p in params.items():
            p.data += t * direction[k]
        val = loss_fn().item()
        for k, p in params.items():
            p.data -= t * direction[k]
        return val

    numeric = (shifted(FD_STEP) - shifted(-FD_STEP)) / (2 * FD_STEP)
    dir_err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)

    names = sorted(params)
    picks = [(names[r.integers(len(names))],) for _ in range(entries)]
    num, ana = [], []
    for (name,) in picks:
        p = params[name]
        flat = p.data.reshape(-1)
        j = int(r.integers(flat.size))
        orig = flat[j]
        flat[j] = orig + FD_STEP
        fp = loss_fn().item()
        flat[j] = orig - FD_STEP
        fm = loss_fn().item()
        flat[j] = orig
        num.append((fp - fm) / (2 * FD_STEP))
        ana.append(grads[name].reshape(-1)[j])
    return dir_err, T.relative_error(np.array(ana), np.array(num))
