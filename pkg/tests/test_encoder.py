import numpy as np
import pytest
import torch

from speechlat import encoder as enc_mod
from speechlat.audio_io import Waveform
from speechlat.encoder import (ToyEncoder, build_toy_encoder, clone_frozen,
                               encode, load_encoder, pretrain_toy_encoder,
                               save_encoder, weights_hash)
from speechlat.errors import ConfigError, DataError

D_S, LAYERS = 48, 4


def small_encoder(seed=0):
    return build_toy_encoder(D_S, LAYERS, seed=seed, heads=4)


def test_build_deterministic():
    a, b = small_encoder(0), small_encoder(0)
    assert weights_hash(a) == weights_hash(b)
    assert weights_hash(small_encoder(1)) != weights_hash(a)


def test_frame_counts():
    enc = small_encoder()
    for dur, expect in ((1.0, 50), (1.5, 75)):
        w = Waveform(np.zeros(int(16000 * dur), dtype=np.float32))
        assert len(encode(enc, w)) == expect


def test_frame_rate_law():
    enc = small_encoder()
    rng = np.random.default_rng(4)
    for _ in range(6):
        n = int(rng.integers(320, 30000))
        w = Waveform((rng.standard_normal(n) * 0.1).astype(np.float32))
        f = encode(enc, w)
        assert len(f) == n // 320
        assert f.frame_rate == 50
        assert np.all(np.isfinite(f.frames))


def test_too_short_waveform():
    enc = small_encoder()
    with pytest.raises(DataError):
        encode(enc, Waveform(np.zeros(319, dtype=np.float32)))


def test_zero_signal_deterministic():
    enc = small_encoder()
    w = Waveform(np.zeros(3200, dtype=np.float32))
    f1, f2 = encode(enc, w), encode(enc, w)
    assert np.array_equal(f1.frames, f2.frames)


def test_stride_stack_must_factor_320():
    with pytest.raises(ConfigError):
        build_toy_encoder(D_S, LAYERS, strides=(5, 4, 4, 2))


def test_layer_tap():
    enc = small_encoder()
    w = Waveform(np.ones(3200, dtype=np.float32) * 0.1)
    last = encode(enc, w)
    mid = encode(enc, w, layer=2)
    assert last.frames.shape == mid.frames.shape
    assert not np.allclose(last.frames, mid.frames)


def test_clone_frozen_bit_identical(corpus):
    enc = small_encoder()
    ref = clone_frozen(enc)
    w = Waveform(np.linspace(-0.2, 0.2, 3200).astype(np.float32))
    assert np.array_equal(encode(enc, w).frames, encode(ref, w).frames)
    before = weights_hash(ref)
    pretrain_toy_encoder(enc, corpus, steps=5, seed=0, batch_size=2, crop_frames=8)
    assert weights_hash(ref) == before
    assert weights_hash(enc) != before
    assert not any(p.requires_grad for p in ref.parameters())


def test_pretrain_zero_steps_identity(corpus):
    enc = small_encoder()
    before = weights_hash(enc)
    pretrain_toy_encoder(enc, corpus, steps=0)
    assert weights_hash(enc) == before


def test_pretrain_reduces_validation_loss(corpus):
    enc = small_encoder()
    v0 = enc_mod.validation_masked_loss(enc, corpus, seed=0)
    pretrain_toy_encoder(enc, corpus, steps=60, seed=0, batch_size=4, crop_frames=16)
    v1 = enc_mod.validation_masked_loss(enc, corpus, seed=0)
    assert np.isfinite(v1)
    assert v1 < v0


def test_pretrain_deterministic(corpus):
    hashes = []
    for _ in range(2):
        enc = small_encoder()
        pretrain_toy_encoder(enc, corpus, steps=8, seed=7, batch_size=2, crop_frames=8)
        hashes.append(weights_hash(enc))
    assert hashes[0] == hashes[1]


def test_save_load_roundtrip(tmp_path):
    enc = small_encoder(3)
    path = tmp_path / "enc.wcck"
    save_encoder(path, enc)
    enc2 = load_encoder(path)
    assert isinstance(enc2, ToyEncoder)
    assert weights_hash(enc2) == weights_hash(enc)


def test_feature_file_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    f = enc_mod.FeatureSequence(rng.standard_normal((7, D_S)).astype(np.float32))
    path = tmp_path / "f.wcub"
    enc_mod.save_features(path, f)
    g = enc_mod.load_features(path)
    assert g.frame_rate == f.frame_rate
    assert np.array_equal(g.frames, f.frames)
