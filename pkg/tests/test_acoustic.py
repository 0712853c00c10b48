import numpy as np
import pytest
import torch

from speechlat import acoustic as ac
from speechlat.acoustic import (DiscriminatorSet, acoustic_loss,
                                build_decoder, build_discriminators, decode,
                                disc_loss_t, feature_matching_loss_t,
                                gen_adv_loss_t, mel_loss)
from speechlat.adapter import Latent
from speechlat.audio_io import Waveform, mel_spectrogram
from speechlat.errors import ConfigError, NumericError

D_Z = 8


def small_decoder(seed=0, **kw):
    return build_decoder(D_Z, seed=seed, hidden=32, n_dec=1, n_voc=1, **kw)


def latent(rng, T):
    return Latent(rng.standard_normal((T, D_Z)).astype(np.float32))


# ---- decode ----------------------------------------------------------------


def test_decode_length_law():
    dec = small_decoder()
    rng = np.random.default_rng(0)
    for T in (5, 13, 50, 121, 500):
        w = decode(dec, latent(rng, T))
        assert len(w) == T * 320


def test_decode_t50_is_16000():
    dec = small_decoder()
    assert len(decode(dec, latent(np.random.default_rng(1), 50))) == 16000


def test_zero_latent_finite_deterministic():
    dec = small_decoder()
    z = Latent(np.zeros((20, D_Z), dtype=np.float32))
    a, b = decode(dec, z), decode(dec, z)
    assert np.all(np.isfinite(a.samples))
    assert np.array_equal(a.samples, b.samples)


def test_decode_frame_rate_mismatch():
    dec = small_decoder()
    with pytest.raises(ConfigError):
        decode(dec, Latent(np.zeros((10, D_Z), dtype=np.float32), frame_rate=25))


def test_25hz_decoder_upsamples():
    dec = small_decoder(latent_rate=25)
    z = Latent(np.zeros((10, D_Z), dtype=np.float32), frame_rate=25)
    assert len(decode(dec, z)) == 10 * 640


def test_decoder_causality():
    """Perturbing latent frame t leaves samples before (t-1)*320 unchanged."""
    dec = small_decoder(seed=4)
    rng = np.random.default_rng(5)
    base = latent(rng, 40)
    y0 = decode(dec, base).samples
    for t in (5, 20, 39):
        bumped = base.frames.copy()
        bumped[t] += 1.0
        y1 = decode(dec, Latent(bumped)).samples
        cutoff = (t - 1) * 320
        assert np.array_equal(y0[:cutoff], y1[:cutoff])
        assert not np.array_equal(y0, y1)


# ---- losses ----------------------------------------------------------------


def test_mel_loss_identity_and_symmetry():
    rng = np.random.default_rng(6)
    x = Waveform((rng.standard_normal(8000) * 0.2).astype(np.float32))
    y = Waveform((rng.standard_normal(8000) * 0.2).astype(np.float32))
    assert mel_loss(x, x) == pytest.approx(0.0, abs=1e-9)
    assert mel_loss(x, y) == pytest.approx(mel_loss(y, x), rel=1e-6)


def test_mel_loss_scalar_oracle():
    rng = np.random.default_rng(7)
    x = Waveform((rng.standard_normal(4000) * 0.3).astype(np.float32))
    y = Waveform((rng.standard_normal(4000) * 0.3).astype(np.float32))
    got = mel_loss(x, y)
    mx = mel_spectrogram(x).frames
    my = mel_spectrogram(y).frames
    total, count = 0.0, 0
    for f in range(mx.shape[0]):
        for b in range(mx.shape[1]):
            total += abs(float(mx[f, b]) - float(my[f, b]))
            count += 1
    assert abs(got - total / count) <= 1e-6 * max(1.0, total / count)


class FakeBranch:
    def __init__(self, logits, taps):
        self.logits = logits
        self.taps = taps


def _outs(logit_values, taps=()):
    return [(torch.as_tensor(v, dtype=torch.float32), [torch.as_tensor(t) for t in taps])
            for v in logit_values]


def test_hinge_saturation():
    real = _outs([np.ones((3, 4))] * 2)
    fake = _outs([-np.ones((3, 4))] * 2)
    assert disc_loss_t(real, fake).item() == pytest.approx(0.0)
    zero = _outs([np.zeros((3, 4))] * 2)
    assert gen_adv_loss_t(zero).item() == pytest.approx(0.0)


def test_hinge_scalar_oracle():
    rng = np.random.default_rng(8)
    for _ in range(10):
        rv = [rng.standard_normal((2, 5)) for _ in range(3)]
        fv = [rng.standard_normal((2, 5)) for _ in range(3)]
        got_d = disc_loss_t(_outs(rv), _outs(fv)).item()
        got_g = gen_adv_loss_t(_outs(fv)).item()
        d_want = g_want = 0.0
        for r, f in zip(rv, fv):
            d_want += np.maximum(0.0, 1.0 - r).mean() + np.maximum(0.0, 1.0 + f).mean()
            g_want += (-f).mean()
        d_want /= len(rv)
        g_want /= len(fv)
        assert abs(got_d - d_want) <= 1e-6 * max(1.0, abs(d_want))
        assert abs(got_g - g_want) <= 1e-6 * max(1.0, abs(g_want))


def test_hinge_nonfinite_errors():
    bad = _outs([np.array([[np.inf]])])
    with pytest.raises(NumericError):
        gen_adv_loss_t(bad)


def test_feature_matching_zero_and_linear():
    taps = [np.ones((2, 3)), np.zeros((4,))]
    same = _outs([np.zeros(1)], taps=taps)
    assert feature_matching_loss_t(same, same).item() == pytest.approx(0.0)
    # single tap shifted by c scales the loss linearly
    for c in (0.5, 1.0, 2.0):
        a = _outs([np.zeros(1)], taps=[np.zeros((3, 3))])
        b = _outs([np.zeros(1)], taps=[np.full((3, 3), c)])
        assert feature_matching_loss_t(a, b).item() == pytest.approx(c, rel=1e-6)


def test_feature_matching_scalar_oracle():
    rng = np.random.default_rng(9)
    ta = [rng.standard_normal((2, 3)), rng.standard_normal((5,))]
    tb = [rng.standard_normal((2, 3)), rng.standard_normal((5,))]
    got = feature_matching_loss_t(_outs([np.zeros(1)], taps=ta),
                                  _outs([np.zeros(1)], taps=tb)).item()
    per_tap = [np.abs(x - y).mean() for x, y in zip(ta, tb)]
    want = float(np.mean(per_tap))
    assert abs(got - want) <= 1e-6 * max(1.0, want)


def test_feature_matching_tap_mismatch():
    a = _outs([np.zeros(1)], taps=[np.zeros(3)])
    b = _outs([np.zeros(1)], taps=[np.zeros(3), np.zeros(3)])
    with pytest.raises(RuntimeError):
        feature_matching_loss_t(a, b)


def test_acoustic_loss_assembly():
    assert acoustic_loss(1.0, 0.0, 0.0) == pytest.approx(4.5)
    assert acoustic_loss(0.2, 1.0, 2.0) == pytest.approx(1.2)
    assert 4.5 / 0.1 == pytest.approx(45.0)
    with pytest.raises(ConfigError):
        acoustic_loss(1.0, 1.0, 1.0, lambda_mel=-0.1)


def test_discriminator_set_structure():
    disc = build_discriminators(seed=0)
    assert isinstance(disc, DiscriminatorSet)
    y = torch.randn(2, 6400) * 0.1
    outs = disc(y)
    assert len(outs) == len(ac.MPD_PERIODS) + len(ac.MRD_RESOLUTIONS)
    for logits, taps in outs:
        assert torch.isfinite(logits).all()
        assert len(taps) >= 1
