import math

import numpy as np
import pytest
import torch

from speechlat import adapter as ad
from speechlat.adapter import (Latent, SemanticAdapter, build_adapter,
                               compress, init_compressor_from_encoder,
                               kl_loss, reparameterize, restore,
                               semantic_loss, semantic_loss_t)
from speechlat.encoder import FeatureSequence, build_toy_encoder, weights_hash
from speechlat.errors import ConfigError, DataError, NumericError

D_S, D_Z = 48, 8


def feats(rng, T=10, d=D_S):
    return FeatureSequence(rng.standard_normal((T, d)).astype(np.float32))


# ---- shapes / bottlenecks --------------------------------------------------


def test_full_scale_compression_ratio():
    # reference configuration compresses 1024 -> 128, an 8x reduction
    assert 1024 // 128 == 8
    a = build_adapter(32, d_z=4, seed=0)
    z = compress(a, feats(np.random.default_rng(0), T=6, d=32))
    assert z.frames.shape == (6, 4)
    assert 32 // 4 == 8


def test_50hz_preserves_T():
    a = build_adapter(D_S, d_z=D_Z, seed=0)
    rng = np.random.default_rng(1)
    for T in (1, 17, 50):
        z = compress(a, feats(rng, T=T))
        assert z.frames.shape == (T, D_Z)
        f_hat = restore(a, z)
        assert f_hat.frames.shape == (T, D_S)


def test_25hz_frame_math():
    a = build_adapter(D_S, d_z=D_Z, seed=0, frame_rate=25)
    rng = np.random.default_rng(2)
    for T, expect in ((50, 25), (51, 26), (1, 1)):
        z = compress(a, feats(rng, T=T))
        assert z.frames.shape == (expect, D_Z)
        assert z.frame_rate == 25
        f_hat = restore(a, z, target_len=T)
        assert f_hat.frames.shape == (T, D_S)


def test_dim_mismatch_errors():
    a = build_adapter(D_S, d_z=D_Z, seed=0)
    with pytest.raises((ConfigError, DataError, RuntimeError)):
        compress(a, feats(np.random.default_rng(0), d=D_S + 1))


def test_ae_deterministic_vae_eval_is_mean():
    rng = np.random.default_rng(3)
    f = feats(rng)
    ae = build_adapter(D_S, d_z=D_Z, seed=0, bottleneck="ae")
    assert np.array_equal(compress(ae, f).frames, compress(ae, f).frames)

    vae = build_adapter(D_S, d_z=D_Z, seed=0, bottleneck="vae")
    z_eval = compress(vae, f)  # eval path: mean
    ft = torch.from_numpy(f.frames)[None]
    with torch.no_grad():
        _, mu, logvar = vae.compress_t(ft, sample=False)
    assert np.allclose(z_eval.frames, mu.numpy(), atol=1e-6)
    # training-mode sampling actually perturbs
    g = torch.Generator().manual_seed(0)
    with torch.no_grad():
        z_s, _, _ = vae.compress_t(ft, sample=True, generator=g)
    assert not np.allclose(z_s.numpy(), mu.numpy())


def test_sigma_vae_uses_fixed_scale():
    f = feats(np.random.default_rng(4))
    sv = build_adapter(D_S, d_z=D_Z, seed=0, bottleneck="sigma_vae", sigma=0.1)
    ft = torch.from_numpy(f.frames)[None]
    with torch.no_grad():
        _, mu, logvar = sv.compress_t(ft, sample=False)
        g1 = torch.Generator().manual_seed(5)
        z, _, _ = sv.compress_t(ft, sample=True, generator=g1)
    # same epsilon draw applied manually with sigma=0.1
    g2 = torch.Generator().manual_seed(5)
    eps = torch.randn(mu.shape, generator=g2)
    assert torch.allclose(z, mu + 0.1 * eps, atol=1e-6)


# ---- semantic loss ---------------------------------------------------------


def test_semantic_loss_identity():
    f = feats(np.random.default_rng(5))
    assert semantic_loss(f, f) == pytest.approx(0.0, abs=1e-7)


def test_semantic_loss_antipodal_unit_frame():
    f = FeatureSequence(np.array([[1.0, 0.0]], dtype=np.float32))
    g = FeatureSequence(np.array([[-1.0, 0.0]], dtype=np.float32))
    # summed squared distance 4 plus cosine term 1-(-1)=2
    assert semantic_loss(f, g) == pytest.approx(6.0, rel=1e-6)


def scalar_loop_semantic(a: np.ndarray, b: np.ndarray) -> float:
    T, D = a.shape
    total = 0.0
    for t in range(T):
        sq = 0.0
        dot = na = nb = 0.0
        for d in range(D):
            sq += (a[t, d] - b[t, d]) ** 2
            dot += a[t, d] * b[t, d]
            na += a[t, d] ** 2
            nb += b[t, d] ** 2
        total += sq + 1.0 - dot / math.sqrt(na * nb)
    return total / T


def test_semantic_loss_scalar_oracle():
    rng = np.random.default_rng(6)
    for _ in range(20):
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((3, 4))
        got = semantic_loss(FeatureSequence(a.astype(np.float32)),
                            FeatureSequence(b.astype(np.float32)))
        want = scalar_loop_semantic(a.astype(np.float32).astype(np.float64),
                                    b.astype(np.float32).astype(np.float64))
        assert abs(got - want) <= 1e-6 * max(1.0, abs(want))


def test_semantic_loss_permutation_invariant():
    rng = np.random.default_rng(7)
    a = rng.standard_normal((9, 5)).astype(np.float32)
    b = rng.standard_normal((9, 5)).astype(np.float32)
    perm = rng.permutation(9)
    v1 = semantic_loss(FeatureSequence(a), FeatureSequence(b))
    v2 = semantic_loss(FeatureSequence(a[perm]), FeatureSequence(b[perm]))
    assert v1 == pytest.approx(v2, rel=1e-6)


def test_semantic_loss_zero_norm_frame_errors():
    a = np.ones((2, 3), dtype=np.float32)
    b = a.copy()
    b[1] = 0.0
    with pytest.raises(NumericError):
        semantic_loss(FeatureSequence(a), FeatureSequence(b))


def test_semantic_loss_gradient_fd():
    torch.manual_seed(8)
    f = torch.randn(4, 8, dtype=torch.float64)
    f_hat = torch.randn(4, 8, dtype=torch.float64, requires_grad=True)
    loss = semantic_loss_t(f, f_hat)
    loss.backward()
    grad = f_hat.grad.clone()
    eps = 1e-6
    for t in range(4):
        for d in range(0, 8, 3):
            fp = f_hat.detach().clone()
            fm = f_hat.detach().clone()
            fp[t, d] += eps
            fm[t, d] -= eps
            num = (semantic_loss_t(f, fp) - semantic_loss_t(f, fm)).item() / (2 * eps)
            assert abs(num - grad[t, d].item()) <= 1e-4 * max(1.0, abs(num))


# ---- KL / reparameterization ----------------------------------------------


def test_kl_closed_forms():
    assert kl_loss(np.zeros((3, 4)), np.zeros((3, 4))) == pytest.approx(0.0)
    assert kl_loss(np.ones((1, 1)), np.zeros((1, 1))) == pytest.approx(0.5)


def test_kl_scalar_oracle():
    rng = np.random.default_rng(9)
    for _ in range(20):
        mu = rng.standard_normal((4, 3))
        logvar = rng.standard_normal((4, 3)) * 0.5
        got = kl_loss(mu, logvar)
        total = 0.0
        for t in range(4):
            for d in range(3):
                total += -(1 + logvar[t, d] - mu[t, d] ** 2
                           - math.exp(logvar[t, d]))
        want = 0.5 * total / 4
        assert abs(got - want) <= 1e-6 * max(1.0, abs(want))


def test_kl_nonfinite_errors():
    with pytest.raises(NumericError):
        kl_loss(np.zeros((1, 1)), np.full((1, 1), np.nan))


def test_reparameterize_statistics():
    mu = torch.full((2000, 4), 1.5)
    logvar = torch.full((2000, 4), math.log(0.25))
    g = torch.Generator().manual_seed(10)
    z = reparameterize(mu, logvar, generator=g)
    assert z.mean().item() == pytest.approx(1.5, abs=0.02)
    assert z.std().item() == pytest.approx(0.5, abs=0.02)


# ---- compressor initialization from the encoder ----------------------------


def test_init_compressor_byte_equality():
    enc = build_toy_encoder(D_S, 4, seed=0)
    a = build_adapter(D_S, d_z=D_Z, seed=1)
    init_compressor_from_encoder(a, enc)
    for i in range(3):
        src = enc.layers[i].state_dict()
        dst = a.comp_layers[i].state_dict()
        for k in src:
            assert torch.equal(src[k], dst[k])
    # training the adapter later must not touch the encoder layers
    before = weights_hash(enc)
    opt = torch.optim.SGD(a.parameters(), lr=0.1)
    x = torch.randn(1, 4, D_S)
    out, _, _ = a.compress_t(x)
    out.square().sum().backward()
    opt.step()
    assert weights_hash(enc) == before
    assert not torch.equal(a.comp_layers[0].state_dict()["ffn.0.weight"],
                           enc.layers[0].state_dict()["ffn.0.weight"])


def test_init_compressor_width_mismatch():
    enc = build_toy_encoder(D_S, 4, seed=0)
    a = build_adapter(D_S + 16, d_z=D_Z, seed=1)
    with pytest.raises(ConfigError):
        init_compressor_from_encoder(a, enc)


def test_restore_compress_finite():
    a = build_adapter(D_S, d_z=D_Z, seed=2)
    rng = np.random.default_rng(11)
    for _ in range(3):
        f = feats(rng, T=int(rng.integers(2, 30)))
        out = restore(a, compress(a, f))
        assert np.all(np.isfinite(out.frames))
