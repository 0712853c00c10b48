import json
import math

import numpy as np
import pytest
import torch

from speechlat.encoder import weights_hash
from speechlat.errors import ConfigError
from speechlat.training import (ModelConfig, StageConfig, Trainer,
                                build_trainer, load_models, lr_schedule,
                                stage2_from_stage1)

MC = ModelConfig(d_s=48, d_z=8, enc_layers=4, heads=4, dec_hidden=32,
                 n_dec=1, n_voc=1)


def small_stage(stage=1, **kw):
    defaults = dict(total_steps=20, warmup_steps=5, batch_size=2,
                    crop_frames=15, seed=11, log_every=1, checkpoint_every=5,
                    adversarial_start_step=0 if stage == 2 else 4)
    defaults.update(kw)
    return StageConfig(stage=stage, **defaults)


# ---- schedule --------------------------------------------------------------


def test_lr_schedule_endpoints():
    assert lr_schedule(0, 10000, 5000, 1e-4) == 0.0
    assert lr_schedule(5000, 10000, 5000, 1e-4) == pytest.approx(1e-4)
    assert abs(lr_schedule(10000, 10000, 5000, 1e-4)) <= 1e-12


def test_lr_schedule_linear_midpoint():
    assert lr_schedule(2500, 10000, 5000, 1e-4) == pytest.approx(5e-5)


def test_lr_schedule_closed_form_sweep():
    total, warmup, peak = 200, 60, 3e-4
    for step in range(total + 1):
        got = lr_schedule(step, total, warmup, peak)
        if step < warmup:
            want = peak * step / warmup
        else:
            want = peak * 0.5 * (1 + math.cos(math.pi * (step - warmup) / (total - warmup)))
        assert got == pytest.approx(want, abs=1e-18)


def test_lr_schedule_rejects_degenerate():
    with pytest.raises(ConfigError):
        lr_schedule(0, 100, 100, 1e-4)


# ---- config ----------------------------------------------------------------


def test_stage_config_defaults():
    s1 = StageConfig(stage=1)
    s2 = StageConfig(stage=2)
    assert s1.adversarial_start_step == 5000
    assert s2.adversarial_start_step == 0
    assert not s1.adversarial_active(4999)
    assert s1.adversarial_active(5000)
    assert s2.adversarial_active(0)
    assert s1.lambda_mel / s1.lambda_adv == pytest.approx(45.0)


def test_stage_config_validation():
    with pytest.raises(ConfigError):
        StageConfig(stage=3)
    with pytest.raises(ConfigError):
        StageConfig(stage=1, warmup_steps=10, total_steps=5)
    with pytest.raises(ConfigError):
        StageConfig(stage=1, lambda_sem=-1.0)


def test_stage2_assembly_arithmetic():
    # Eq-style recombination: acoustic 2.0 plus anchoring terms 0.3 + 0.7
    lam = 1.0
    assert 2.0 + lam * (0.3 + 0.7) == pytest.approx(3.0)


# ---- steps -----------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_manifest(corpus):
    from speechlat.corpus import CorpusManifest

    return CorpusManifest(corpus.entries[:8], root=corpus.root)


def test_batch_determinism(tiny_manifest):
    t1 = build_trainer(small_stage(), MC, tiny_manifest)
    t2 = build_trainer(small_stage(), MC, tiny_manifest)
    for step in (0, 3, 7):
        assert torch.equal(t1.make_batch(step), t2.make_batch(step))
    assert not torch.equal(t1.make_batch(0), t1.make_batch(1))


def test_stage1_step_gating(tiny_manifest):
    trainer = build_trainer(small_stage(), MC, tiny_manifest)
    frozen_before = weights_hash(trainer.encoder_frozen)
    y = trainer.make_batch(0)

    trainer.gen_opt.zero_grad(set_to_none=True)
    sem_obj, l_acous, parts, _ = trainer.stage1_losses(y, 0, adv_active=True)
    l_acous.backward()
    # acoustic gradients never reach the adapter (or the frozen encoder)
    for name, p in trainer.gen_named:
        if name.startswith("adapter"):
            assert p.grad is None or torch.all(p.grad == 0)
    assert any(p.grad is not None and p.grad.abs().sum() > 0
               for name, p in trainer.gen_named if name.startswith("decoder"))
    assert weights_hash(trainer.encoder_frozen) == frozen_before


def test_stage1_lambda_sem_zero_is_byte_noop(tiny_manifest):
    trainer = build_trainer(small_stage(lambda_sem=0.0, warmup_steps=1), MC,
                            tiny_manifest)
    trainer.train_step()  # move past the lr=0 warmup start
    before = {k: v.clone() for k, v in trainer.adapter.state_dict().items()}
    rec = trainer.train_step()
    assert rec["lr"] > 0
    after = trainer.adapter.state_dict()
    for k in before:
        assert torch.equal(before[k], after[k]), k


def test_metric_record_components(tiny_manifest):
    trainer = build_trainer(small_stage(), MC, tiny_manifest)
    rec = trainer.train_step()  # step 0: adversarial inactive (start=4)
    for key in ("step", "stage", "lr", "loss_total", "l_mel", "l_adv",
                "l_fm", "l_acous", "l_sem", "grad_norm_adapter",
                "grad_norm_decoder"):
        assert key in rec, key
    assert rec["adv_active"] is False
    assert rec["l_adv"] == 0.0 and rec["l_fm"] == 0.0
    # logged totals recombine from logged components
    want = trainer.cfg.lambda_sem * rec["l_sem"] + rec["l_acous"]
    assert rec["loss_total"] == pytest.approx(want, rel=1e-6)
    want_ac = (4.5 * rec["l_mel"] + 0.1 * rec["l_adv"] + 0.1 * rec["l_fm"])
    assert rec["l_acous"] == pytest.approx(want_ac, rel=1e-6)


def test_adversarial_gating_behavior(tiny_manifest):
    trainer = build_trainer(small_stage(adversarial_start_step=2), MC, tiny_manifest)
    recs = [trainer.train_step() for _ in range(4)]
    assert [r["adv_active"] for r in recs] == [False, False, True, True]
    assert all("l_disc" not in r for r in recs[:2])
    assert all("l_disc" in r for r in recs[2:])
    assert recs[1]["l_adv"] == 0.0
    assert recs[2]["l_adv"] != 0.0


def test_stage2_step_reaches_encoder(tiny_manifest):
    trainer = build_trainer(small_stage(stage=2), MC, tiny_manifest)
    frozen_before = weights_hash(trainer.encoder_frozen)
    adapted_before = weights_hash(trainer.encoder_adapted)
    trainer.train_step()  # step 0 has lr=0 under warmup
    rec = trainer.train_step()
    assert "l_sem_feat" in rec and "l_sem_rec" in rec
    assert rec["grad_norm_encoder_adapted"] > 0
    assert weights_hash(trainer.encoder_frozen) == frozen_before
    assert weights_hash(trainer.encoder_adapted) != adapted_before
    want = rec["l_acous"] + 1.0 * (rec["l_sem_feat"] + rec["l_sem_rec"])
    assert rec["loss_total"] == pytest.approx(want, rel=1e-6)


def test_logged_lr_matches_schedule(tiny_manifest):
    trainer = build_trainer(small_stage(), MC, tiny_manifest)
    recs = trainer.train(until=6)
    for r in recs:
        assert r["lr"] == lr_schedule(r["step"], 20, 5, 1e-4)


# ---- checkpointing ---------------------------------------------------------


def test_resume_bit_identical(tmp_path, tiny_manifest):
    cfg = small_stage(total_steps=16)
    base = build_trainer(cfg, MC, tiny_manifest)
    straight = []
    for _ in range(6):
        straight.append(base.train_step())
    ckpt = tmp_path / "step-6.wcck"
    base.save_checkpoint(ckpt)
    tail = [base.train_step() for _ in range(10)]

    resumed = Trainer.from_checkpoint(ckpt, tiny_manifest)
    assert resumed.step == 6
    tail2 = [resumed.train_step() for _ in range(10)]
    assert json.dumps(tail) == json.dumps(tail2)
    assert weights_hash(base.adapter) == weights_hash(resumed.adapter)
    assert weights_hash(base.decoder) == weights_hash(resumed.decoder)


def test_checkpoint_roundtrip_and_load_models(tmp_path, tiny_manifest):
    trainer = build_trainer(small_stage(), MC, tiny_manifest)
    trainer.train_step()
    path = tmp_path / "ck.wcck"
    trainer.save_checkpoint(path)
    cfg, mc, frozen, adapted, adapter, decoder = load_models(path)
    assert mc.d_s == MC.d_s and mc.d_z == MC.d_z
    assert adapted is None  # stage 1
    assert weights_hash(frozen) == weights_hash(trainer.encoder_frozen)
    assert weights_hash(adapter) == weights_hash(trainer.adapter)
    assert weights_hash(decoder) == weights_hash(trainer.decoder)


def test_stage2_from_stage1_initialization(tmp_path, tiny_manifest):
    s1 = build_trainer(small_stage(), MC, tiny_manifest)
    for _ in range(2):
        s1.train_step()
    ckpt = tmp_path / "s1.wcck"
    s1.save_checkpoint(ckpt)
    s2 = stage2_from_stage1(ckpt, small_stage(stage=2), tiny_manifest)
    assert weights_hash(s2.adapter) == weights_hash(s1.adapter)
    assert weights_hash(s2.decoder) == weights_hash(s1.decoder)
    assert weights_hash(s2.encoder_frozen) == weights_hash(s1.encoder_frozen)
    # adapted encoder starts from the frozen reference
    assert weights_hash(s2.encoder_adapted) == weights_hash(s2.encoder_frozen)
