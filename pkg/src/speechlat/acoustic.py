"""Latent-to-waveform acoustic stack.

Decoder: input conv -> causal transformer stack at the latent rate ->
2x upsample -> causal vocoder transformer stack at the 100 Hz STFT frame
rate -> magnitude/phase head -> ISTFT. Every stage is causal, so a
perturbation at latent frame t cannot reach output samples earlier than
(t - 1) * 320 (one centered ISTFT half-window of blur).

Discriminators: multi-period branches on time-domain reshapes and
multi-resolution branches on STFT magnitudes, each exposing intermediate
feature taps for the feature-matching loss. Adversarial objectives use the
hinge formulation.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import audio_io
from .adapter import Latent
from .audio_io import Waveform, istft_tensor, mel_tensor, stft_tensor
from .blocks import TransformerLayer
from .errors import ConfigError, NumericError
from .seeding import derive_seed

MPD_PERIODS = (2, 3, 5, 7, 11)
MRD_RESOLUTIONS = (512, 1024, 2048)  # hop = nfft // 4

SAMPLES_PER_FRAME = 320  # at the 50 Hz latent rate


class CausalConv1d(nn.Conv1d):
    def forward(self, x):
        x = F.pad(x, (self.kernel_size[0] - 1, 0))
        return super().forward(x)


class AcousticDecoder(nn.Module):
    """Causal transformer decoder + transformer vocoder + ISTFT head."""

    def __init__(self, d_z: int, hidden: int = 256, n_dec: int = 4,
                 n_voc: int = 3, heads: int = 4, latent_rate: int = 50,
                 nfft: int = audio_io.NFFT, hop: int = audio_io.HOP):
        super().__init__()
        if latent_rate not in (50, 25):
            raise ConfigError(f"latent_rate must be 50 or 25, got {latent_rate}")
        self.d_z = d_z
        self.latent_rate = latent_rate
        self.nfft = nfft
        self.hop = hop
        self.n_bins = nfft // 2 + 1
        self.in_conv = CausalConv1d(d_z, hidden, kernel_size=3)
        self.dec_layers = nn.ModuleList(
            TransformerLayer(hidden, heads, causal=True) for _ in range(n_dec))
        self.voc_layers = nn.ModuleList(
            TransformerLayer(hidden, heads, causal=True) for _ in range(n_voc))
        self.head = nn.Linear(hidden, 3 * self.n_bins)  # log-mag + (cos, sin) pair

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        """(B, T', d_z) latent -> (B, T * 320) waveform at 16 kHz."""
        if z.shape[-1] != self.d_z:
            raise ConfigError(f"latent dim {z.shape[-1]} != decoder d_z {self.d_z}")
        if self.latent_rate == 25:
            z = torch.repeat_interleave(z, 2, dim=1)
        t = z.shape[1]
        h = self.in_conv(z.transpose(1, 2)).transpose(1, 2)
        for lyr in self.dec_layers:
            h = lyr(h)
        h = torch.repeat_interleave(h, 2, dim=1)  # 50 Hz -> 100 Hz frame rate
        for lyr in self.voc_layers:
            h = lyr(h)
        out = self.head(h)
        log_mag, re, im = out.chunk(3, dim=-1)
        mag = torch.exp(torch.clamp(log_mag, max=8.0))
        phase = torch.atan2(im, re + 1e-9)
        spec = torch.polar(mag, phase)
        length = t * SAMPLES_PER_FRAME
        return istft_tensor(spec, length=length, nfft=self.nfft, hop=self.hop,
                            win=self.nfft)


def build_decoder(d_z: int, seed: int = 0, **kwargs) -> AcousticDecoder:
    torch.manual_seed(derive_seed(seed, "decoder"))
    return AcousticDecoder(d_z, **kwargs)


def decode(dec: AcousticDecoder, z: Latent) -> Waveform:
    if z.frame_rate != dec.latent_rate:
        raise ConfigError(
            f"latent at {z.frame_rate} Hz fed to decoder trained at {dec.latent_rate} Hz")
    dec.eval()
    with torch.no_grad():
        y = dec(torch.from_numpy(z.frames)[None])[0]
    return Waveform(y.numpy())


class _PeriodBranch(nn.Module):
    def __init__(self, period: int, channels=(8, 16, 32)):
        super().__init__()
        self.period = period
        convs = []
        in_ch = 1
        for ch in channels:
            convs.append(nn.Conv2d(in_ch, ch, (5, 1), stride=(3, 1), padding=(2, 0)))
            in_ch = ch
        self.convs = nn.ModuleList(convs)
        self.post = nn.Conv2d(in_ch, 1, (3, 1), padding=(1, 0))

    def forward(self, y: torch.Tensor):
        b, n = y.shape
        pad = (-n) % self.period
        x = F.pad(y, (0, pad)).reshape(b, 1, -1, self.period)
        feats = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.1)
            feats.append(x)
        logits = self.post(x)
        return logits, feats


class _ResolutionBranch(nn.Module):
    def __init__(self, nfft: int, channels=(8, 16, 32)):
        super().__init__()
        self.nfft = nfft
        self.hop = nfft // 4
        convs = []
        in_ch = 1
        for ch in channels:
            convs.append(nn.Conv2d(in_ch, ch, (3, 3), stride=(1, 2), padding=(1, 1)))
            in_ch = ch
        self.convs = nn.ModuleList(convs)
        self.post = nn.Conv2d(in_ch, 1, (3, 3), padding=(1, 1))

    def forward(self, y: torch.Tensor):
        mag = stft_tensor(y, nfft=self.nfft, hop=self.hop, win=self.nfft).abs()
        x = torch.log1p(mag)[:, None]
        feats = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.1)
            feats.append(x)
        logits = self.post(x)
        return logits, feats


class DiscriminatorSet(nn.Module):
    """Multi-period + multi-resolution discriminators with feature taps."""

    def __init__(self, periods=MPD_PERIODS, resolutions=MRD_RESOLUTIONS,
                 channels=(8, 16, 32)):
        super().__init__()
        self.branches = nn.ModuleList(
            [_PeriodBranch(p, channels) for p in periods]
            + [_ResolutionBranch(r, channels) for r in resolutions])

    def forward(self, y: torch.Tensor):
        """(B, N) waveform -> list of (logits, [feature maps]) per branch."""
        return [branch(y) for branch in self.branches]


def build_discriminators(seed: int = 0, **kwargs) -> DiscriminatorSet:
    torch.manual_seed(derive_seed(seed, "discriminators"))
    return DiscriminatorSet(**kwargs)


def mel_loss_t(y: torch.Tensor, y_hat: torch.Tensor) -> torch.Tensor:
    """L1 distance between log-mel spectrograms; lengths cropped to match."""
    n = min(y.shape[-1], y_hat.shape[-1])
    return (mel_tensor(y[..., :n]) - mel_tensor(y_hat[..., :n])).abs().mean()


def mel_loss(y: Waveform, y_hat: Waveform) -> float:
    a = torch.from_numpy(y.samples.astype(np.float64))
    b = torch.from_numpy(y_hat.samples.astype(np.float64))
    return float(mel_loss_t(a, b).item())


def _check_logits(outs):
    for logits, _ in outs:
        if not torch.isfinite(logits).all():
            raise NumericError("non-finite discriminator logits")


def disc_loss_t(real_outs, fake_outs) -> torch.Tensor:
    """Hinge discriminator objective, averaged over branches."""
    _check_logits(real_outs)
    _check_logits(fake_outs)
    losses = []
    for (real, _), (fake, _) in zip(real_outs, fake_outs):
        losses.append(F.relu(1.0 - real).mean() + F.relu(1.0 + fake).mean())
    return torch.stack(losses).mean()


def gen_adv_loss_t(fake_outs) -> torch.Tensor:
    """Hinge generator objective, averaged over branches."""
    _check_logits(fake_outs)
    return torch.stack([(-fake).mean() for fake, _ in fake_outs]).mean()


def feature_matching_loss_t(real_outs, fake_outs) -> torch.Tensor:
    """Mean over branches and taps of L1 between intermediate features."""
    losses = []
    for (_, real_feats), (_, fake_feats) in zip(real_outs, fake_outs):
        if len(real_feats) != len(fake_feats):
            raise RuntimeError("discriminator tap-count mismatch")
        for rf, ff in zip(real_feats, fake_feats):
            losses.append((rf - ff).abs().mean())
    return torch.stack(losses).mean()


def disc_loss(disc: DiscriminatorSet, y: Waveform, y_hat: Waveform) -> float:
    with torch.no_grad():
        real = disc(torch.from_numpy(y.samples)[None])
        fake = disc(torch.from_numpy(y_hat.samples)[None])
        return float(disc_loss_t(real, fake).item())


def gen_adv_loss(disc: DiscriminatorSet, y_hat: Waveform) -> float:
    with torch.no_grad():
        return float(gen_adv_loss_t(disc(torch.from_numpy(y_hat.samples)[None])).item())


def feature_matching_loss(disc: DiscriminatorSet, y: Waveform, y_hat: Waveform) -> float:
    with torch.no_grad():
        real = disc(torch.from_numpy(y.samples)[None])
        fake = disc(torch.from_numpy(y_hat.samples)[None])
        return float(feature_matching_loss_t(real, fake).item())


def acoustic_loss(l_mel, l_adv, l_fm, lambda_mel: float = 4.5,
                  lambda_adv: float = 0.1, lambda_fm: float = 0.1):
    """Weighted sum of the mel, adversarial, and feature-matching terms."""
    if lambda_mel < 0 or lambda_adv < 0 or lambda_fm < 0:
        raise ConfigError("loss coefficients must be non-negative")
    return lambda_mel * l_mel + lambda_adv * l_adv + lambda_fm * l_fm
