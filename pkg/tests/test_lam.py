import numpy as np
import pytest
import torch

from ssmvla.errors import ShapeMismatchError
from ssmvla.frontend import PatchFeatures
from ssmvla.lam import (
    Codebook,
    FarsightedLAM,
    LAMConfig,
    decode,
    encode,
    lam_losses,
    lam_train_step,
    quantize,
)
from ssmvla.objectives import LossWeights

TINY = dict(width=32, code_dim=16, enc_layers=1, dec_layers=1, heads=2, patch=16)
# smallest setting that keeps the codebook spread after the warm-up
DESK = dict(enc_layers=2, dec_layers=2, patch=8)


def _clip_batch(b=2, seed=0, n=3):
    g = torch.Generator().manual_seed(seed)
    return {
        "features": torch.randn(b, n + 1, 64, 64, generator=g),
        "rgb": torch.rand(b, n + 1, 64, 64, 3, generator=g),
        "depth": 1.5 + 0.5 * torch.rand(b, n + 1, 64, 64, generator=g),
    }


def test_continuous_shape():
    m = FarsightedLAM(LAMConfig(**TINY))
    feats = [PatchFeatures(torch.randn(64, 64), (8, 8)) for _ in range(4)]
    assert encode(feats, m).shape == (3, 4, 16)
    with pytest.raises(ShapeMismatchError):
        encode(feats[:3], m)


def test_quantize_small_cases():
    cb = torch.tensor([[0.0, 0.0], [1.0, 0.0]])
    idx, q = quantize(torch.tensor([[0.9, 0.1]]), cb)
    assert idx.tolist() == [1]
    idx, q = quantize(cb.clone(), cb)
    assert idx.tolist() == [0, 1] and torch.equal(q, cb)
    idx, _ = quantize(torch.tensor([[0.5, 0.0]]), cb)
    assert idx.tolist() == [0]


def test_quantize_matches_brute_force():
    g = torch.Generator().manual_seed(0)
    for case in range(200):
        k = 2 + case % 31
        codes = torch.randn(k, 6, generator=g)
        x = torch.randn(7, 6, generator=g)
        idx, q = quantize(x, codes)
        d = ((x.double()[:, None] - codes.double()[None]) ** 2).sum(-1)
        assert torch.equal(idx, d.argmin(1))
        assert torch.equal(q, codes[idx])


def test_straight_through_gradient_is_bit_equal():
    cb = Codebook(32, 8, seed=0)
    x = torch.randn(5, 4, 8, requires_grad=True)
    _, q = quantize(x, cb)
    q.retain_grad()
    w = torch.randn(5, 4, 8)
    (q * w).sum().backward()
    assert torch.equal(x.grad, q.grad)


def test_codebook_rows_distinct_at_init():
    cb = Codebook(32, 64, seed=3)
    assert len(torch.unique(cb.codes, dim=0)) == 32
    assert torch.isfinite(cb.codes).all()


def test_encoder_is_causal():
    m = FarsightedLAM(LAMConfig(**TINY)).eval()
    f = torch.randn(1, 4, 64, 64)
    z = m.encode(f)
    later = f.clone()
    later[:, 3] += torch.randn(64, 64)
    z2 = m.encode(later)
    assert torch.equal(z[:, :2], z2[:, :2])
    assert not torch.equal(z[:, 2], z2[:, 2])
    mid = f.clone()
    mid[:, 2] += torch.randn(64, 64)
    z3 = m.encode(mid)
    assert torch.equal(z[:, :1], z3[:, :1])
    first = f.clone()
    first[:, 0] += 1.0
    assert not torch.equal(m.encode(first), z)


def test_decoder_is_blind_to_future_frames():
    m = FarsightedLAM(LAMConfig(**TINY)).eval()
    batch = _clip_batch()
    _, _, out = lam_losses(m, batch, LossWeights(lambda_lpips=0.0))
    noisy = {k: v.clone() for k, v in batch.items()}
    noisy["rgb"][:, 1:] = torch.rand_like(noisy["rgb"][:, 1:])
    noisy["depth"][:, 1:] = torch.rand_like(noisy["depth"][:, 1:]) + 1
    _, _, out2 = lam_losses(m, noisy, LossWeights(lambda_lpips=0.0))
    assert torch.equal(out["rgb"], out2["rgb"]) and torch.equal(out["depth"], out2["depth"])


def test_decode_determinism_and_shapes():
    m = FarsightedLAM(LAMConfig(**TINY)).eval()
    rgb, depth = torch.rand(64, 64, 3), torch.full((64, 64), 2.0)
    z = m.codebook.codes[:4].detach()
    a, b = decode(rgb, depth, z, m), decode(rgb, depth, z, m)
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])
    assert a[1].shape == (64, 64) and torch.isfinite(a[1]).all()
    with pytest.raises(ShapeMismatchError):
        decode(rgb, depth, z[:3], m)


def test_quantized_rows_are_codes_in_forward():
    m = FarsightedLAM(LAMConfig(**TINY, vq_warmup_steps=0))
    out = m(*[_clip_batch()[k] if k == "features" else _clip_batch()[k][:, 0] for k in ("features", "rgb", "depth")])
    assert torch.equal(out["quantized"].detach(), m.codebook.codes.detach()[out["indices"]])


def test_first_loss_finite_positive():
    m = FarsightedLAM(LAMConfig(**TINY))
    opt = torch.optim.Adam(m.parameters(), 1e-3)
    v = lam_train_step(m, _clip_batch(), opt, LossWeights(lambda_lpips=0.0))
    assert np.isfinite(v["loss"]) and v["loss"] > 0


def test_overfit_single_clip(small_store):
    m = FarsightedLAM(LAMConfig(**TINY, vq_warmup_steps=50))
    m.set_feature_stats(torch.cat(small_store.features))
    batch = small_store.lam_batch([(0, 2)] * 4, 3, 1)
    opt = torch.optim.Adam(m.parameters(), 3e-3)
    w = LossWeights(lambda_lpips=0.0)
    first = lam_train_step(m, batch, opt, w)["rec"]
    for _ in range(99):
        last = lam_train_step(m, batch, opt, w)["rec"]
    assert last <= 0.5 * first


@pytest.fixture(scope="module")
def trained_lam(small_store):
    cfg = LAMConfig(**DESK, vq_warmup_steps=60)
    m = FarsightedLAM(cfg)
    m.set_feature_stats(torch.cat(small_store.features))
    opt = torch.optim.Adam(m.parameters(), 1e-3)
    g = torch.Generator().manual_seed(0)
    anchors = small_store.anchors()
    w = LossWeights(lambda_lpips=0.0)
    for _ in range(160):
        pick = torch.randint(0, len(anchors), (16,), generator=g).tolist()
        lam_train_step(m, small_store.lam_batch([anchors[i] for i in pick], 3, 1), opt, w)
    return m.eval()


def test_codebook_usage_after_warmup(trained_lam, small_store):
    idx = trained_lam.latent_indices(small_store.lam_batch(small_store.anchors(), 3, 1)["features"])
    assert len(torch.unique(idx)) >= 8


def test_different_codes_decode_differently(trained_lam):
    rgb, depth = torch.rand(1, 64, 64, 3), torch.full((1, 64, 64), 2.0)
    codes = trained_lam.codebook.codes.detach()
    a, _ = trained_lam.decode(rgb, depth, codes[[0, 1, 2, 3]][None])
    b, _ = trained_lam.decode(rgb, depth, codes[[4, 5, 6, 7]][None])
    assert (a - b).norm() > 0
