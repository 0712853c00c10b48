"""Stage-1 and stage-2 optimization loops.

Stage 1: the frozen encoder feeds the adapter, which is trained by the
semantic loss; the decoder is warmed up on the detached latent so acoustic
gradients never touch the adapter or encoder. Stage 2 unfreezes a copy of
the encoder and trains everything end-to-end, anchored to the frozen
reference by the semantic loss.

Determinism: batches and sampling noise are pure functions of
(seed, step), so resuming from a checkpoint reproduces the unresumed
trajectory bit-identically.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch

from .acoustic import (AcousticDecoder, DiscriminatorSet, acoustic_loss,
                       build_decoder, build_discriminators, disc_loss_t,
                       feature_matching_loss_t, gen_adv_loss_t, mel_loss_t)
from .adapter import (SemanticAdapter, build_adapter,
                      init_compressor_from_encoder, kl_loss_t, semantic_loss_t)
from .audio_io import load_wav
from .containers import load_wcck, save_wcck
from .corpus import CorpusManifest
from .encoder import ToyEncoder, build_toy_encoder, clone_frozen
from .errors import ConfigError, NumericError
from .seeding import derive_seed


@dataclass
class ModelConfig:
    d_s: int = 256
    d_z: int = 128
    enc_layers: int = 6
    heads: int = 4
    dec_hidden: int = 256
    n_dec: int = 4
    n_voc: int = 3
    bottleneck: str = "ae"
    frame_rate: int = 50
    sigma: float = 0.1
    tap_layer: int | None = None
    beta_kl: float = 1e-4


@dataclass
class StageConfig:
    stage: int = 1
    total_steps: int = 10000
    warmup_steps: int = 5000
    peak_lr: float = 1e-4
    lambda_mel: float = 4.5
    lambda_adv: float = 0.1
    lambda_fm: float = 0.1
    lambda_sem: float = 1.0
    adversarial_start_step: int | None = None  # defaults: 5000 stage 1, 0 stage 2
    batch_size: int = 8
    crop_frames: int = 50  # 1.0 s at 50 Hz
    seed: int = 0
    log_every: int = 10
    checkpoint_every: int = 1000
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    reinit_discriminators: bool = False

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if self.warmup_steps > self.total_steps:
            raise ConfigError("warmup_steps must be <= total_steps")
        for name in ("lambda_mel", "lambda_adv", "lambda_fm", "lambda_sem"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.adversarial_start_step is None:
            self.adversarial_start_step = 5000 if self.stage == 1 else 0

    def adversarial_active(self, step: int) -> bool:
        return step >= self.adversarial_start_step


def lr_schedule(step: int, total: int, warmup: int, peak: float) -> float:
    """Linear warmup from 0 to peak, then cosine annealing to 0."""
    if total <= warmup:
        raise ConfigError(f"total ({total}) must exceed warmup ({warmup})")
    if step < warmup:
        return peak * step / warmup
    return peak * 0.5 * (1.0 + math.cos(math.pi * (step - warmup) / (total - warmup)))


def _named_trainable(module: torch.nn.Module, prefix: str):
    return [(f"{prefix}.{n}", p) for n, p in module.named_parameters() if p.requires_grad]


class Trainer:
    """Owns all mutable state for one training stage."""

    def __init__(self, cfg: StageConfig, model_cfg: ModelConfig,
                 manifest: CorpusManifest, encoder_frozen: ToyEncoder,
                 adapter: SemanticAdapter, decoder: AcousticDecoder,
                 discriminators: DiscriminatorSet,
                 encoder_adapted: ToyEncoder | None = None):
        if cfg.stage == 2 and encoder_adapted is None:
            raise ConfigError("stage 2 requires an adapted encoder")
        self.cfg = cfg
        self.model_cfg = model_cfg
        self.manifest = manifest
        self.encoder_frozen = encoder_frozen
        self.encoder_adapted = encoder_adapted
        self.adapter = adapter
        self.decoder = decoder
        self.disc = discriminators
        self.step = 0
        self._audio = [load_wav(manifest.wav_path(e)).samples
                       for e in manifest.entries]

        for p in self.encoder_frozen.parameters():
            p.requires_grad_(False)
        self.encoder_frozen.eval()

        groups = [_named_trainable(adapter, "adapter"),
                  _named_trainable(decoder, "decoder")]
        if cfg.stage == 2:
            groups.insert(0, _named_trainable(encoder_adapted, "encoder_adapted"))
        self.gen_named = [item for g in groups for item in g]
        self.group_names = {}
        for g in groups:
            for name, p in g:
                self.group_names[name] = name.split(".", 1)[0]
        self.gen_opt = torch.optim.AdamW(
            [p for _, p in self.gen_named], lr=cfg.peak_lr,
            betas=(0.9, 0.999), weight_decay=cfg.weight_decay)
        self.disc_named = _named_trainable(self.disc, "disc")
        self.disc_opt = torch.optim.AdamW(
            [p for _, p in self.disc_named], lr=cfg.peak_lr,
            betas=(0.9, 0.999), weight_decay=cfg.weight_decay)

    # ---- data -------------------------------------------------------------

    def make_batch(self, step: int) -> torch.Tensor:
        rng = np.random.default_rng(derive_seed(self.cfg.seed, "batch", self.cfg.stage, step))
        crop = self.cfg.crop_frames * 320
        rows = []
        for idx in rng.integers(0, len(self._audio), self.cfg.batch_size):
            x = self._audio[int(idx)]
            if len(x) < crop:
                x = np.pad(x, (0, crop - len(x)))
            start = int(rng.integers(0, len(x) - crop + 1))
            rows.append(x[start:start + crop])
        return torch.from_numpy(np.stack(rows))

    def _step_generator(self, step: int) -> torch.Generator:
        g = torch.Generator()
        g.manual_seed(derive_seed(self.cfg.seed, "noise", self.cfg.stage, step))
        return g

    # ---- loss assembly ----------------------------------------------------

    def _acoustic_terms(self, y: torch.Tensor, y_hat: torch.Tensor, adv_active: bool):
        cfg = self.cfg
        l_mel = mel_loss_t(y, y_hat)
        parts = {"l_mel": l_mel}
        if adv_active:
            with torch.no_grad():
                real_outs = self.disc(y)
            fake_outs = self.disc(y_hat)
            parts["l_adv"] = gen_adv_loss_t(fake_outs)
            parts["l_fm"] = feature_matching_loss_t(real_outs, fake_outs)
        else:
            parts["l_adv"] = torch.zeros(())
            parts["l_fm"] = torch.zeros(())
        l_acous = acoustic_loss(parts["l_mel"], parts["l_adv"], parts["l_fm"],
                                cfg.lambda_mel, cfg.lambda_adv, cfg.lambda_fm)
        parts["l_acous"] = l_acous
        return l_acous, parts

    def stage1_losses(self, y: torch.Tensor, step: int, adv_active: bool):
        """Forward pass of the stage-1 topology.

        Returns (sem_objective | None, acoustic_objective, parts). The
        acoustic objective is computed on the detached latent, so its
        gradients cannot reach the adapter or encoder.
        """
        cfg, mc = self.cfg, self.model_cfg
        with torch.no_grad():
            f = self.encoder_frozen(y, layer=mc.tap_layer)
        sample = mc.bottleneck != "ae"
        z, mu, logvar = self.adapter.compress_t(
            f, sample=sample, generator=self._step_generator(step))
        parts = {}
        sem_obj = None
        if cfg.lambda_sem > 0:
            f_hat = self.adapter.restore_t(z, target_len=f.shape[1])
            l_sem = semantic_loss_t(f, f_hat)
            parts["l_sem"] = l_sem
            sem_obj = cfg.lambda_sem * l_sem
            if mc.bottleneck == "vae":
                l_kl = kl_loss_t(mu, logvar)
                parts["l_kl"] = l_kl
                sem_obj = sem_obj + mc.beta_kl * l_kl
        y_hat = self.decoder(z.detach())
        l_acous, ac_parts = self._acoustic_terms(y, y_hat, adv_active)
        parts.update(ac_parts)
        return sem_obj, l_acous, parts, y_hat

    def stage2_losses(self, y: torch.Tensor, step: int, adv_active: bool):
        """Forward pass of the stage-2 topology: end-to-end reconstruction
        with semantic anchoring against the frozen reference."""
        cfg, mc = self.cfg, self.model_cfg
        f_adapt = self.encoder_adapted(y, layer=mc.tap_layer)
        with torch.no_grad():
            f_ref = self.encoder_frozen(y, layer=mc.tap_layer)
        sample = mc.bottleneck != "ae"
        z, mu, logvar = self.adapter.compress_t(
            f_adapt, sample=sample, generator=self._step_generator(step))
        f_hat = self.adapter.restore_t(z, target_len=f_adapt.shape[1])
        y_hat = self.decoder(z)
        l_acous, parts = self._acoustic_terms(y, y_hat, adv_active)
        l_sem_feat = semantic_loss_t(f_adapt, f_ref)
        l_sem_rec = semantic_loss_t(f_hat, f_ref)
        parts["l_sem_feat"] = l_sem_feat
        parts["l_sem_rec"] = l_sem_rec
        total = l_acous + cfg.lambda_sem * (l_sem_feat + l_sem_rec)
        if mc.bottleneck == "vae":
            l_kl = kl_loss_t(mu, logvar)
            parts["l_kl"] = l_kl
            total = total + mc.beta_kl * l_kl
        return total, parts, y_hat

    # ---- optimization -----------------------------------------------------

    def _grad_norms(self) -> dict[str, float]:
        sq = {}
        for name, p in self.gen_named:
            if p.grad is not None:
                g = self.group_names[name]
                sq[g] = sq.get(g, 0.0) + float((p.grad ** 2).sum().item())
        return {f"grad_norm_{g}": math.sqrt(v) for g, v in sq.items()}

    def _apply_lr(self, lr: float):
        for group in self.gen_opt.param_groups:
            group["lr"] = lr
        for group in self.disc_opt.param_groups:
            group["lr"] = lr

    def train_step(self) -> dict:
        """Run one optimization step and return the metric record."""
        cfg = self.cfg
        step = self.step
        lr = lr_schedule(step, cfg.total_steps, cfg.warmup_steps, cfg.peak_lr)
        self._apply_lr(lr)
        adv_active = cfg.adversarial_active(step)
        y = self.make_batch(step)

        self.gen_opt.zero_grad(set_to_none=True)
        if cfg.stage == 1:
            sem_obj, l_acous, parts, y_hat = self.stage1_losses(y, step, adv_active)
            gen_loss = l_acous if sem_obj is None else sem_obj + l_acous
        else:
            gen_loss, parts, y_hat = self.stage2_losses(y, step, adv_active)
        if not torch.isfinite(gen_loss):
            raise NumericError(
                f"non-finite generator loss at step {step}: "
                + json.dumps({k: float(v.item()) for k, v in parts.items()}))
        gen_loss.backward()
        record = {"step": step, "stage": cfg.stage, "lr": lr,
                  "adv_active": adv_active,
                  "loss_total": float(gen_loss.item())}
        record.update({k: float(v.item()) for k, v in parts.items()})
        record.update(self._grad_norms())
        torch.nn.utils.clip_grad_norm_(
            [p for _, p in self.gen_named if p.grad is not None], cfg.grad_clip)
        self.gen_opt.step()

        if adv_active:
            self.disc_opt.zero_grad(set_to_none=True)
            real = self.disc(y)
            fake = self.disc(y_hat.detach())
            d_loss = disc_loss_t(real, fake)
            if not torch.isfinite(d_loss):
                raise NumericError(f"non-finite discriminator loss at step {step}")
            d_loss.backward()
            torch.nn.utils.clip_grad_norm_(
                [p for _, p in self.disc_named if p.grad is not None], cfg.grad_clip)
            self.disc_opt.step()
            record["l_disc"] = float(d_loss.item())

        self.step += 1
        return record

    def train(self, run_dir=None, metrics_fh=None, until: int | None = None):
        """Advance to `until` (default total_steps), logging and writing
        periodic checkpoints under run_dir/checkpoints."""
        cfg = self.cfg
        until = cfg.total_steps if until is None else until
        ckpt_dir = None
        if run_dir is not None:
            ckpt_dir = Path(run_dir) / "checkpoints"
            ckpt_dir.mkdir(parents=True, exist_ok=True)
        records = []
        while self.step < until:
            record = self.train_step()
            if self.step % cfg.log_every == 0 or self.step == until:
                records.append(record)
                if metrics_fh is not None:
                    metrics_fh.write(json.dumps(record) + "\n")
                    metrics_fh.flush()
            if ckpt_dir is not None and (
                    self.step % cfg.checkpoint_every == 0 or self.step == until):
                self.save_checkpoint(ckpt_dir / f"step-{self.step}.wcck")
        return records

    # ---- persistence ------------------------------------------------------

    def _module_map(self) -> dict[str, torch.nn.Module]:
        mods = {"encoder_frozen": self.encoder_frozen, "adapter": self.adapter,
                "decoder": self.decoder, "disc": self.disc}
        if self.encoder_adapted is not None:
            mods["encoder_adapted"] = self.encoder_adapted
        return mods

    def _opt_tensors(self, opt, named, prefix):
        out = {}
        lookup = {id(p): n for n, p in named}
        for p, state in opt.state.items():
            name = lookup[id(p)]
            for key in ("exp_avg", "exp_avg_sq"):
                out[f"{prefix}/{name}/{key}"] = state[key].detach().numpy()
            out[f"{prefix}/{name}/step"] = np.asarray(
                float(state["step"]), dtype=np.float32)
        return out

    def save_checkpoint(self, path):
        tensors = {}
        for mod_name, mod in self._module_map().items():
            for k, v in mod.state_dict().items():
                tensors[f"model/{mod_name}/{k}"] = v.detach().numpy()
        tensors.update(self._opt_tensors(self.gen_opt, self.gen_named, "opt_gen"))
        tensors.update(self._opt_tensors(self.disc_opt, self.disc_named, "opt_disc"))
        metadata = {"kind": "trainer", "step": self.step,
                    "stage_config": asdict(self.cfg),
                    "model_config": asdict(self.model_cfg)}
        save_wcck(path, metadata, tensors)

    def _load_opt(self, opt, named, prefix, tensors):
        for name, p in named:
            key = f"{prefix}/{name}/exp_avg"
            if key not in tensors:
                continue
            opt.state[p] = {
                "step": torch.tensor(float(tensors[f"{prefix}/{name}/step"])),
                "exp_avg": torch.from_numpy(tensors[key].copy()),
                "exp_avg_sq": torch.from_numpy(tensors[f"{prefix}/{name}/exp_avg_sq"].copy()),
            }

    @classmethod
    def from_checkpoint(cls, path, manifest: CorpusManifest) -> "Trainer":
        metadata, tensors = load_wcck(path)
        cfg = StageConfig(**metadata["stage_config"])
        mc = ModelConfig(**metadata["model_config"])
        trainer = build_trainer(cfg, mc, manifest)
        for mod_name, mod in trainer._module_map().items():
            state = {}
            prefix = f"model/{mod_name}/"
            for key, arr in tensors.items():
                if key.startswith(prefix):
                    state[key[len(prefix):]] = torch.from_numpy(arr.copy())
            mod.load_state_dict(state)
        trainer._load_opt(trainer.gen_opt, trainer.gen_named, "opt_gen", tensors)
        trainer._load_opt(trainer.disc_opt, trainer.disc_named, "opt_disc", tensors)
        trainer.step = int(metadata["step"])
        return trainer


def load_models(path):
    """Load the inference-side modules from a trainer checkpoint.

    Returns (stage_cfg, model_cfg, encoder_frozen, encoder_adapted | None,
    adapter, decoder). The acting encoder for encode/reconstruct is the
    adapted one when present (stage-2 checkpoints), else the frozen one.
    """
    metadata, tensors = load_wcck(path)
    if metadata.get("kind") != "trainer":
        raise ConfigError(f"{path} is not a trainer checkpoint")
    cfg = StageConfig(**metadata["stage_config"])
    mc = ModelConfig(**metadata["model_config"])
    enc_frozen = build_toy_encoder(mc.d_s, mc.enc_layers, cfg.seed, mc.heads)
    adapter = build_adapter(mc.d_s, mc.d_z, cfg.seed, mc.heads,
                            mc.bottleneck, mc.frame_rate, mc.sigma)
    decoder = build_decoder(mc.d_z, cfg.seed, hidden=mc.dec_hidden,
                            n_dec=mc.n_dec, n_voc=mc.n_voc, heads=mc.heads,
                            latent_rate=mc.frame_rate)
    mods = {"encoder_frozen": enc_frozen, "adapter": adapter, "decoder": decoder}
    enc_adapted = None
    if any(k.startswith("model/encoder_adapted/") for k in tensors):
        enc_adapted = build_toy_encoder(mc.d_s, mc.enc_layers, cfg.seed, mc.heads)
        mods["encoder_adapted"] = enc_adapted
    for mod_name, mod in mods.items():
        prefix = f"model/{mod_name}/"
        state = {k[len(prefix):]: torch.from_numpy(v.copy())
                 for k, v in tensors.items() if k.startswith(prefix)}
        mod.load_state_dict(state)
        mod.eval()
        for p in mod.parameters():
            p.requires_grad_(False)
    return cfg, mc, enc_frozen, enc_adapted, adapter, decoder


def build_trainer(cfg: StageConfig, mc: ModelConfig, manifest: CorpusManifest,
                  encoder: ToyEncoder | None = None) -> Trainer:
    """Construct a trainer with fresh (seed-deterministic) modules.

    The caller normally supplies a pretrained encoder and, for stage 2,
    loads weights from a stage-1 checkpoint afterwards.
    """
    enc = encoder if encoder is not None else build_toy_encoder(
        mc.d_s, mc.enc_layers, cfg.seed, mc.heads)
    adapter = build_adapter(mc.d_s, mc.d_z, cfg.seed, mc.heads,
                            mc.bottleneck, mc.frame_rate, mc.sigma)
    init_compressor_from_encoder(adapter, enc)
    decoder = build_decoder(mc.d_z, cfg.seed, hidden=mc.dec_hidden,
                            n_dec=mc.n_dec, n_voc=mc.n_voc, heads=mc.heads,
                            latent_rate=mc.frame_rate)
    disc = build_discriminators(cfg.seed)
    frozen = clone_frozen(enc)
    adapted = None
    if cfg.stage == 2:
        adapted = clone_frozen(enc)
        for p in adapted.parameters():
            p.requires_grad_(True)
        adapted.train()
    return Trainer(cfg, mc, manifest, frozen, adapter, decoder, disc, adapted)


def stage2_from_stage1(stage1_ckpt, cfg: StageConfig, manifest: CorpusManifest) -> Trainer:
    """Build a stage-2 trainer initialized from a stage-1 checkpoint:
    adapter/decoder/discriminators carry over, the adapted encoder starts
    from the frozen reference weights."""
    if cfg.stage != 2:
        raise ConfigError("stage2_from_stage1 needs a stage-2 config")
    metadata, tensors = load_wcck(stage1_ckpt)
    mc = ModelConfig(**metadata["model_config"])
    trainer = build_trainer(cfg, mc, manifest)
    carried = ["encoder_frozen", "adapter", "decoder"]
    if not cfg.reinit_discriminators:
        carried.append("disc")
    mods = trainer._module_map()
    for mod_name in carried:
        prefix = f"model/{mod_name}/"
        state = {k[len(prefix):]: torch.from_numpy(v.copy())
                 for k, v in tensors.items() if k.startswith(prefix)}
        mods[mod_name].load_state_dict(state)
    # Adapted encoder starts from the frozen reference weights.
    trainer.encoder_adapted.load_state_dict(
        {k: v.clone() for k, v in trainer.encoder_frozen.state_dict().items()})
    return trainer
