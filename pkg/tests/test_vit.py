import numpy as np
import pytest

from mjplab import tensor as T
from mjplab.errors import ContractError, DimensionError
from mjplab.jigsaw import blockwise_mask, jigsaw_permutation, make_rng, patchify
from mjplab.vit import (StepOptions, ViTConfig, init_model, model_forward, msa_forward, no_decay_names,
                        train_step)

from conftest import FD_RTOL, model_fd_case, randomize_unk, tiny_config


def test_config_validation():
    with pytest.raises(DimensionError):
        ViTConfig(dim=10, heads=4)
    with pytest.raises(DimensionError):
        ViTConfig(img_h=30, patch=4)
    cfg = ViTConfig()
    assert cfg.num_patches == 64 and cfg.patch_dim == 48 and cfg.grid == (8, 8)


def test_default_model_size():
    # 32x32x3, P=4, D=64, 4 blocks: on the order of 200k parameters
    n = init_model(ViTConfig(), 0).num_parameters()
    assert 180_000 < n < 240_000


def test_msa_single_token():
    snap = init_model(tiny_config(), 0)
    p = snap.params
    z = np.random.default_rng(0).normal(size=(1, 8))
    out, att = msa_forward(T.Tensor(z), p, "blocks.0.attn", 2)
    v = z @ p["blocks.0.attn.v.w"].data + p["blocks.0.attn.v.b"].data
    np.testing.assert_allclose(att.data, 1.0)
    np.testing.assert_allclose(out.data, v @ p["blocks.0.attn.o.w"].data + p["blocks.0.attn.o.b"].data,
                               rtol=1e-14)


def test_msa_zero_values():
    snap = init_model(tiny_config(), 0)
    for k in ("v.w", "v.b", "o.b"):
        snap.params["blocks.0.attn." + k].data[...] = 0
    out, _ = msa_forward(T.Tensor(np.random.default_rng(0).normal(size=(5, 8))), snap.params, "blocks.0.attn", 2)
    assert not out.data.any()


def test_msa_permutation_equivariance():
    snap = init_model(tiny_config(), 1)
    z = np.random.default_rng(0).normal(size=(6, 8))
    pi = np.concatenate([[0], 1 + np.random.default_rng(1).permutation(5)])
    a, _ = msa_forward(T.Tensor(z), snap.params, "blocks.0.attn", 2)
    b, _ = msa_forward(T.Tensor(z[pi]), snap.params, "blocks.0.attn", 2)
    np.testing.assert_allclose(b.data, a.data[pi], atol=1e-13)


def test_msa_bad_heads():
    snap = init_model(tiny_config(), 0)
    with pytest.raises(DimensionError):
        msa_forward(T.Tensor(np.zeros((3, 8))), snap.params, "blocks.0.attn", 3)


def _img(cfg, seed=0):
    return np.random.default_rng(seed).random((cfg.img_h, cfg.img_w, cfg.channels))


def test_forward_shapes_and_attention():
    cfg = tiny_config()
    snap = init_model(cfg, 0)
    res = model_forward(patchify(_img(cfg), cfg.patch), snap, keep_attention=True)
    assert res.logits.shape == (3,) and res.cls_embed.shape == (8,)
    assert len(res.attention) == 2 and res.attention[0].shape == (2, 5, 5)
    np.testing.assert_allclose(res.attention[1].sum(axis=-1), 1.0)


def test_batch_forward_matches_single():
    cfg = tiny_config()
    snap = init_model(cfg, 0)
    x = np.stack([patchify(_img(cfg, s), cfg.patch) for s in range(3)])
    batch = model_forward(x, snap).logits.data
    for i in range(3):
        np.testing.assert_allclose(model_forward(x[i], snap).logits.data, batch[i], rtol=1e-12)


def test_aware_zero_mask_equals_standard():
    cfg = tiny_config()
    snap = randomize_unk(init_model(cfg, 0))
    x = patchify(_img(cfg), cfg.patch)
    a = model_forward(x, snap).cls_embed.data
    b = model_forward(x, snap, mode="aware", mask=np.zeros(4)).cls_embed.data
    np.testing.assert_array_equal(a, b)


def test_oblivious_identity_perm_equals_standard():
    cfg = tiny_config()
    snap = init_model(cfg, 0)
    x = patchify(_img(cfg), cfg.patch)
    np.testing.assert_array_equal(model_forward(x, snap).logits.data,
                                  model_forward(x, snap, mode="oblivious", perm=np.arange(4)).logits.data)


def test_aware_requires_mask():
    cfg = tiny_config()
    with pytest.raises(ContractError):
        model_forward(np.zeros((4, 48)), init_model(cfg, 0), mode="aware")


def test_aware_within_mask_invariance():
    cfg = ViTConfig(img_h=16, img_w=16, channels=3, patch=4, dim=16, depth=2, heads=2, mlp_ratio=2)
    snap = randomize_unk(init_model(cfg, 2), 2)
    x = patchify(_img(cfg), cfg.patch)
    mask = blockwise_mask(4, 4, 0.5, make_rng(0))
    ref = model_forward(x, snap, "aware", mask=mask, perm=jigsaw_permutation(mask, make_rng(1))).cls_embed.data
    for s in range(2, 8):
        out = model_forward(x, snap, "aware", mask=mask, perm=jigsaw_permutation(mask, make_rng(s))).cls_embed.data
        assert np.max(np.abs(out - ref)) < 1e-9


def test_pe_free_full_permutation_invariance():
    cfg = ViTConfig(img_h=16, img_w=16, channels=3, patch=4, dim=16, depth=2, heads=2, mlp_ratio=2, use_pe=False)
    snap = init_model(cfg, 0)
    assert not snap.params["embed.pos"].requires_grad
    x = patchify(_img(cfg), cfg.patch)
    ref = model_forward(x, snap).cls_embed.data
    out = model_forward(x, snap, "oblivious", perm=np.random.default_rng(0).permutation(16)).cls_embed.data
    assert np.max(np.abs(out - ref)) < 1e-9


def test_positions_matter_with_pe():
    cfg = tiny_config()
    snap = randomize_unk(init_model(cfg, 0))
    x = patchify(_img(cfg), cfg.patch)
    out = model_forward(x, snap, "oblivious", perm=np.array([1, 0, 3, 2])).cls_embed.data
    assert np.max(np.abs(out - model_forward(x, snap).cls_embed.data)) > 1e-6


@pytest.mark.parametrize("seed", range(3))
def test_full_model_gradient(seed):
    d, e = model_fd_case(seed)
    assert d < FD_RTOL and e < FD_RTOL


def test_no_decay_names():
    snap = init_model(tiny_config(dal="ln"), 0)
    skip = no_decay_names(snap.params)
    assert "embed.pos" in skip and "embed.unk" in skip and "blocks.0.ln1.g" in skip
    assert "embed.proj" not in skip and "blocks.0.attn.q.w" not in skip and "dal.w" not in skip


def _train_setup(cfg, gamma=0.0, lam=0.01, lr=3e-3):
    snap = init_model(cfg, 0)
    opt = T.init_adamw(snap.trainable(), lr=lr, weight_decay=0.0, no_decay=no_decay_names(snap.params))
    return snap, opt, StepOptions(gamma=gamma, lam=lam)


@pytest.mark.filterwarnings("ignore:DAL loss over an empty")
def test_train_step_breakdown_additive():
    cfg = tiny_config(dal="nln", dal_hidden=8)
    snap, opt, opts = _train_setup(cfg, gamma=0.5)
    imgs = np.random.default_rng(0).random((4, 8, 8, 3))
    out = train_step(snap, opt, imgs, [0, 1, 2, 0], opts, make_rng(0, 1), make_rng(0, 2))
    assert out["total"] == out["ce"] + 0.01 * out["dal"]
    assert out["mask_ratio"] >= 0.5


def test_overfit_one_batch():
    cfg = tiny_config()
    snap, opt, opts = _train_setup(cfg, lam=0.0, lr=1e-2)
    imgs = np.random.default_rng(0).random((6, 8, 8, 3))
    labels = [0, 1, 2, 0, 1, 2]
    losses = [train_step(snap, opt, imgs, labels, opts, make_rng(0, 1), make_rng(0, 2))["ce"] for _ in range(50)]
    assert losses[-1] < 0.1 < losses[0]


@pytest.mark.filterwarnings("ignore:DAL loss over an empty")
def test_train_step_deterministic():
    cfg = tiny_config(dal="ln")
    imgs = np.random.default_rng(0).random((4, 8, 8, 3))
    runs = []
    for _ in range(2):
        snap, opt, opts = _train_setup(cfg, gamma=0.5)
        runs.append([train_step(snap, opt, imgs, [0, 1, 2, 0], opts, make_rng(s, 1), make_rng(s, 2))["total"]
                     for s in range(5)])
    assert runs[0] == runs[1]


def test_train_step_gamma_range():
    cfg = tiny_config()
    snap, opt, _ = _train_setup(cfg)
    with pytest.raises(ContractError):
        train_step(snap, opt, np.zeros((1, 8, 8, 3)), [0], StepOptions(gamma=1.2), make_rng(0), make_rng(1))


def test_idx_variant_runs():
    cfg = ViTConfig(img_h=8, img_w=8, channels=3, patch=4, dim=8, depth=1, heads=2, mlp_ratio=2, classes=3,
                    use_idx=True)
    snap, opt, _ = _train_setup(cfg)
    out = train_step(snap, opt, np.random.default_rng(0).random((2, 8, 8, 3)), [0, 1],
                     StepOptions(gamma=0.5, unk=False), make_rng(0, 1), make_rng(0, 2))
    assert np.isfinite(out["total"])
