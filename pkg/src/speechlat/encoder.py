"""Toy masked-prediction speech encoder.

A small stand-in for a frozen SSL model: a strided conv frontend with total
stride 320 (16 kHz -> 50 Hz) followed by transformer layers. Pretraining
masks contiguous frame spans and regresses log-mel target frames at masked
positions from context, which forces the features to carry the spectral
envelope of the signal.
"""

from __future__ import annotations

import copy
import hashlib
import math

import numpy as np
import torch
import torch.nn as nn

from .audio_io import N_MELS, Waveform, load_wav, mel_spectrogram
from .blocks import TransformerLayer, flat_params
from .containers import load_wcub, save_wcub, save_wcck
from .corpus import CorpusManifest
from .errors import ConfigError, DataError, NumericError
from .seeding import derive_seed

TOTAL_STRIDE = 320
DEFAULT_STRIDES = (5, 4, 4, 2, 2)


class FeatureSequence:
    """T x d_s frame matrix at a fixed frame rate."""

    def __init__(self, frames: np.ndarray, frame_rate: int = 50):
        frames = np.asarray(frames, dtype=np.float32)
        if frames.ndim != 2:
            raise DataError(f"features must be 2-D, got shape {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise DataError("features contain non-finite entries")
        self.frames = frames
        self.frame_rate = int(frame_rate)

    @property
    def d(self) -> int:
        return self.frames.shape[1]

    def __len__(self):
        return self.frames.shape[0]


def save_features(path, f: FeatureSequence) -> None:
    save_wcub(path, f.frames, f.frame_rate)


def load_features(path) -> FeatureSequence:
    frames, frame_rate = load_wcub(path)
    return FeatureSequence(frames, frame_rate)


class ToyEncoder(nn.Module):
    """Conv frontend (total stride 320) + transformer stack."""

    def __init__(self, d_s: int = 256, n_layers: int = 6, heads: int = 4,
                 strides=DEFAULT_STRIDES, freeze_frontend: bool = False):
        super().__init__()
        if d_s < 8:
            raise ConfigError(f"d_s must be >= 8, got {d_s}")
        if n_layers < 4:
            raise ConfigError(f"need n_layers >= 4 (first three layers are copied), got {n_layers}")
        if math.prod(strides) != TOTAL_STRIDE:
            raise ConfigError(f"stride stack {strides} does not factor {TOTAL_STRIDE}")
        self.d_s = d_s
        self.strides = tuple(strides)
        convs = []
        in_ch = 1
        for s in strides:
            convs.append(nn.Conv1d(in_ch, d_s, kernel_size=s, stride=s))
            convs.append(nn.GELU())
            in_ch = d_s
        self.frontend = nn.Sequential(*convs)
        self.frontend_norm = nn.LayerNorm(d_s)
        self.layers = nn.ModuleList(TransformerLayer(d_s, heads) for _ in range(n_layers))
        self.mask_emb = nn.Parameter(torch.zeros(d_s))
        nn.init.normal_(self.mask_emb, std=0.1)
        self.pred_head = nn.Linear(d_s, N_MELS)
        if freeze_frontend:
            for p in self.frontend.parameters():
                p.requires_grad_(False)

    def frontend_features(self, wav: torch.Tensor) -> torch.Tensor:
        """(B, N) samples -> (B, T, d_s) pre-transformer features, T = floor(N/320)."""
        h = self.frontend(wav[:, None, :]).transpose(1, 2)
        return self.frontend_norm(h)

    def forward(self, wav: torch.Tensor, layer: int | None = None,
                mask: torch.Tensor | None = None) -> torch.Tensor:
        """Encode a (B, N) waveform batch to (B, T, d_s) features.

        layer selects the tap (1-based, default last); mask is a (B, T) bool
        tensor of positions replaced by the mask embedding (pretraining only).
        """
        h = self.frontend_features(wav)
        if mask is not None:
            h = torch.where(mask[..., None], self.mask_emb.to(h.dtype), h)
        tap = len(self.layers) if layer is None else layer
        if not (1 <= tap <= len(self.layers)):
            raise ConfigError(f"tap layer {tap} outside 1..{len(self.layers)}")
        for lyr in self.layers[:tap]:
            h = lyr(h)
        return h


def build_toy_encoder(d_s: int = 256, n_layers: int = 6, seed: int = 0,
                      heads: int = 4, strides=DEFAULT_STRIDES,
                      freeze_frontend: bool = False) -> ToyEncoder:
    """Deterministically initialized toy encoder."""
    torch.manual_seed(derive_seed(seed, "toy_encoder"))
    return ToyEncoder(d_s, n_layers, heads, strides, freeze_frontend)


def encode(enc: ToyEncoder, w: Waveform, layer: int | None = None) -> FeatureSequence:
    if len(w) < TOTAL_STRIDE:
        raise DataError(f"waveform of {len(w)} samples below receptive field {TOTAL_STRIDE}")
    enc.eval()
    with torch.no_grad():
        x = torch.from_numpy(w.samples)[None]
        frames = enc(x, layer=layer)[0].numpy()
    return FeatureSequence(frames, frame_rate=50)


def clone_frozen(enc: ToyEncoder) -> ToyEncoder:
    """Value-independent deep copy with gradients disabled."""
    clone = copy.deepcopy(enc)
    for p in clone.parameters():
        p.requires_grad_(False)
    clone.eval()
    return clone


def weights_hash(module: nn.Module) -> str:
    """SHA-256 over every parameter/buffer byte, for immutability checks."""
    return hashlib.sha256(flat_params(module)).hexdigest()


def _mask_spans(rng: np.random.Generator, batch: int, t: int,
                ratio: float = 0.5, span: int = 5) -> np.ndarray:
    """Contiguous-span frame mask covering ~ratio of each row."""
    mask = np.zeros((batch, t), dtype=bool)
    target = int(round(ratio * t))
    for b in range(batch):
        while mask[b].sum() < target:
            start = int(rng.integers(0, max(1, t - span + 1)))
            mask[b, start:start + span] = True
    return mask


def _load_corpus_audio(manifest: CorpusManifest) -> list[np.ndarray]:
    return [load_wav(manifest.wav_path(e)).samples for e in manifest.entries]


def make_batch(audio: list[np.ndarray], rng: np.random.Generator,
               batch_size: int, crop_frames: int) -> torch.Tensor:
    """Seeded random crops, (batch_size, crop_frames * 320)."""
    crop = crop_frames * TOTAL_STRIDE
    rows = []
    for idx in rng.integers(0, len(audio), batch_size):
        x = audio[int(idx)]
        if len(x) < crop:
            x = np.pad(x, (0, crop - len(x)))
        start = int(rng.integers(0, len(x) - crop + 1))
        rows.append(x[start:start + crop])
    return torch.from_numpy(np.stack(rows))


def mel_targets(wav: torch.Tensor) -> torch.Tensor:
    """(B, N) samples -> (B, N // 320, n_mels) log-mel frames at 50 Hz.

    The 100 Hz mel frames are mean-pooled in adjacent pairs to line up with
    the encoder frame rate.
    """
    rows = []
    for row in wav.numpy():
        t = len(row) // TOTAL_STRIDE
        m = mel_spectrogram(Waveform(row, 16000)).frames
        rows.append(m[:2 * t].reshape(t, 2, N_MELS).mean(axis=1))
    return torch.from_numpy(np.stack(rows))


def pretrain_toy_encoder(enc: ToyEncoder, manifest: CorpusManifest, steps: int,
                         seed: int = 0, batch_size: int = 8, crop_frames: int = 32,
                         lr: float = 1e-3, log_every: int = 100,
                         logger=None) -> ToyEncoder:
    """Masked-frame prediction pretraining (in place; returns enc).

    Masks 50% of frames in contiguous spans and regresses the log-mel target
    frames at masked positions with an L2 objective.
    """
    if steps == 0:
        return enc
    audio = _load_corpus_audio(manifest)
    val_rng = np.random.default_rng(derive_seed(seed, "pretrain", "val"))
    val_wav = make_batch(audio, val_rng, batch_size, crop_frames)
    val_mask = torch.from_numpy(_mask_spans(val_rng, batch_size, crop_frames))

    def masked_loss(wav, mask):
        target = mel_targets(wav)
        h = enc(wav, mask=mask)
        pred = enc.pred_head(h)
        diff = (pred - target)[mask]
        return (diff ** 2).mean()

    opt = torch.optim.AdamW((p for p in enc.parameters() if p.requires_grad), lr=lr)
    enc.train()
    for step in range(steps):
        rng = np.random.default_rng(derive_seed(seed, "pretrain", step))
        wav = make_batch(audio, rng, batch_size, crop_frames)
        mask = torch.from_numpy(_mask_spans(rng, batch_size, crop_frames))
        loss = masked_loss(wav, mask)
        if not torch.isfinite(loss):
            raise NumericError(f"masked-prediction loss diverged at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if logger is not None and (step % log_every == 0 or step == steps - 1):
            enc.eval()
            with torch.no_grad():
                vl = masked_loss(val_wav, val_mask).item()
            enc.train()
            logger({"step": step, "loss": float(loss.item()), "val_loss": vl})
    enc.eval()
    return enc


def save_encoder(path, enc: ToyEncoder) -> None:
    """Persist encoder weights + architecture in a WCCK container."""
    tensors = {f"model/encoder/{k}": v.detach().numpy()
               for k, v in enc.state_dict().items()}
    metadata = {"kind": "encoder",
                "arch": {"d_s": enc.d_s, "n_layers": len(enc.layers),
                         "heads": enc.layers[0].attn.num_heads,
                         "strides": list(enc.strides)}}
    save_wcck(path, metadata, tensors)


def load_encoder(path) -> ToyEncoder:
    from .containers import load_wcck

    metadata, tensors = load_wcck(path)
    if metadata.get("kind") != "encoder":
        raise DataError(f"{path} is not an encoder checkpoint")
    arch = metadata["arch"]
    enc = ToyEncoder(arch["d_s"], arch["n_layers"], arch["heads"],
                     tuple(arch["strides"]))
    enc.load_state_dict({k[len("model/encoder/"):]: torch.from_numpy(v.copy())
                         for k, v in tensors.items()})
    enc.eval()
    return enc


def validation_masked_loss(enc: ToyEncoder, manifest: CorpusManifest,
                           seed: int = 0, batch_size: int = 8,
                           crop_frames: int = 32) -> float:
    """Masked-prediction loss on the fixed validation batch for a seed."""
    audio = _load_corpus_audio(manifest)
    val_rng = np.random.default_rng(derive_seed(seed, "pretrain", "val"))
    wav = make_batch(audio, val_rng, batch_size, crop_frames)
    mask = torch.from_numpy(_mask_spans(val_rng, batch_size, crop_frames))
    enc.eval()
    with torch.no_grad():
        target = mel_targets(wav)
        pred = enc.pred_head(enc(wav, mask=mask))
        return float(((pred - target)[mask] ** 2).mean().item())
