"""Symmetric semantic compressor / restorer around the latent bottleneck.

Compressor: 3 transformer layers + 2-layer MLP (hidden 576, GELU) down to
d_z. Restorer mirrors it. Bottleneck variants: plain AE, VAE (learned
log-variance + KL), and sigma-VAE (fixed standard deviation). A 25 Hz
variant average-pools frames after the compressor transformer and
duplicates them before the restorer transformer.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import FeatureSequence, ToyEncoder
from .errors import ConfigError, DataError, NumericError
from .seeding import derive_seed

MLP_HIDDEN = 576
BOTTLENECKS = ("ae", "vae", "sigma_vae")


class Latent:
    """T' x d_z frame matrix at 50 or 25 Hz."""

    def __init__(self, frames: np.ndarray, frame_rate: int = 50):
        frames = np.asarray(frames, dtype=np.float32)
        if frames.ndim != 2:
            raise DataError(f"latent must be 2-D, got shape {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise DataError("latent contains non-finite entries")
        if frame_rate not in (50, 25):
            raise DataError(f"latent frame rate must be 50 or 25, got {frame_rate}")
        self.frames = frames
        self.frame_rate = int(frame_rate)

    @property
    def d(self) -> int:
        return self.frames.shape[1]

    def __len__(self):
        return self.frames.shape[0]


class SemanticAdapter(nn.Module):
    def __init__(self, d_s: int, d_z: int = 128, heads: int = 4,
                 bottleneck: str = "ae", frame_rate: int = 50,
                 sigma: float = 0.1):
        super().__init__()
        if bottleneck not in BOTTLENECKS:
            raise ConfigError(f"bottleneck must be one of {BOTTLENECKS}, got {bottleneck!r}")
        if frame_rate not in (50, 25):
            raise ConfigError(f"frame_rate must be 50 or 25, got {frame_rate}")
        from .blocks import TransformerLayer

        self.d_s = d_s
        self.d_z = d_z
        self.bottleneck = bottleneck
        self.frame_rate = frame_rate
        self.sigma = float(sigma)
        self.comp_layers = nn.ModuleList(TransformerLayer(d_s, heads) for _ in range(3))
        out_dim = 2 * d_z if bottleneck == "vae" else d_z
        self.comp_mlp = nn.Sequential(
            nn.Linear(d_s, MLP_HIDDEN), nn.GELU(), nn.Linear(MLP_HIDDEN, out_dim))
        self.rest_mlp = nn.Sequential(
            nn.Linear(d_z, MLP_HIDDEN), nn.GELU(), nn.Linear(MLP_HIDDEN, d_s))
        self.rest_layers = nn.ModuleList(TransformerLayer(d_s, heads) for _ in range(3))

    def compress_t(self, f: torch.Tensor, sample: bool = False,
                   generator: torch.Generator | None = None):
        """(B, T, d_s) -> (z, mu, logvar); mu/logvar are None outside VAE mode.

        sample=True draws through the reparameterization path (training);
        sample=False returns the deterministic mean path (eval).
        """
        if f.shape[-1] != self.d_s:
            raise ConfigError(f"feature dim {f.shape[-1]} != adapter d_s {self.d_s}")
        h = f
        for lyr in self.comp_layers:
            h = lyr(h)
        if self.frame_rate == 25:
            h = F.avg_pool1d(h.transpose(1, 2), kernel_size=2, stride=2,
                             ceil_mode=True, count_include_pad=False).transpose(1, 2)
        out = self.comp_mlp(h)
        if self.bottleneck == "ae":
            return out, None, None
        if self.bottleneck == "vae":
            mu, logvar = out.chunk(2, dim=-1)
            if not torch.isfinite(logvar).all():
                raise NumericError("non-finite log-variance in VAE bottleneck")
            z = reparameterize(mu, logvar, generator=generator) if sample else mu
            return z, mu, logvar
        # sigma-VAE: fixed standard deviation, no learned variance.
        mu = out
        if sample:
            eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
            z = mu + self.sigma * eps
        else:
            z = mu
        return z, mu, None

    def restore_t(self, z: torch.Tensor, target_len: int | None = None) -> torch.Tensor:
        """(B, T', d_z) -> (B, T, d_s)."""
        if z.shape[-1] != self.d_z:
            raise ConfigError(f"latent dim {z.shape[-1]} != adapter d_z {self.d_z}")
        h = self.rest_mlp(z)
        if self.frame_rate == 25:
            h = torch.repeat_interleave(h, 2, dim=1)
            if target_len is not None:
                h = h[:, :target_len]
        for lyr in self.rest_layers:
            h = lyr(h)
        return h


def build_adapter(d_s: int, d_z: int = 128, seed: int = 0, heads: int = 4,
                  bottleneck: str = "ae", frame_rate: int = 50,
                  sigma: float = 0.1) -> SemanticAdapter:
    torch.manual_seed(derive_seed(seed, "adapter"))
    return SemanticAdapter(d_s, d_z, heads, bottleneck, frame_rate, sigma)


def init_compressor_from_encoder(adapter: SemanticAdapter, enc: ToyEncoder) -> SemanticAdapter:
    """Copy the encoder's first three transformer layers into the compressor."""
    if enc.d_s != adapter.d_s:
        raise ConfigError(f"encoder width {enc.d_s} != adapter d_s {adapter.d_s}")
    for dst, src in zip(adapter.comp_layers, enc.layers[:3]):
        dst.load_state_dict(src.state_dict())
    return adapter


def compress(adapter: SemanticAdapter, f: FeatureSequence) -> Latent:
    """Deterministic (eval-mode) compression of a feature sequence."""
    adapter.eval()
    with torch.no_grad():
        z, _, _ = adapter.compress_t(torch.from_numpy(f.frames)[None], sample=False)
    return Latent(z[0].numpy(), frame_rate=adapter.frame_rate)


def restore(adapter: SemanticAdapter, z: Latent, target_len: int | None = None) -> FeatureSequence:
    adapter.eval()
    with torch.no_grad():
        f = adapter.restore_t(torch.from_numpy(z.frames)[None], target_len=target_len)
    return FeatureSequence(f[0].numpy(), frame_rate=50)


def semantic_loss_t(f: torch.Tensor, f_hat: torch.Tensor,
                    norm_floor: float = 1e-8) -> torch.Tensor:
    """Per-frame channel-summed squared error plus cosine distance, averaged
    over frames: mean_t [ ||f_t - f̂_t||^2 + 1 - cos(f_t, f̂_t) ]."""
    if f.shape != f_hat.shape:
        raise ConfigError(f"shape mismatch {tuple(f.shape)} vs {tuple(f_hat.shape)}")
    norm_a = torch.linalg.vector_norm(f, dim=-1)
    norm_b = torch.linalg.vector_norm(f_hat, dim=-1)
    if (norm_a < norm_floor).any() or (norm_b < norm_floor).any():
        raise NumericError("zero-norm frame: cosine term undefined")
    mse = ((f - f_hat) ** 2).sum(dim=-1)
    cos = (f * f_hat).sum(dim=-1) / (norm_a * norm_b)
    return (mse + 1.0 - cos).mean()


def semantic_loss(f: FeatureSequence, f_hat: FeatureSequence) -> float:
    return float(semantic_loss_t(torch.from_numpy(f.frames).double(),
                                 torch.from_numpy(f_hat.frames).double()).item())


def kl_loss_t(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL to the standard normal: -1/2 mean_t sum_d (1 + logvar - mu^2 - var)."""
    if not torch.isfinite(logvar).all():
        raise NumericError("non-finite log-variance")
    per_frame = (1.0 + logvar - mu ** 2 - torch.exp(logvar)).sum(dim=-1)
    return -0.5 * per_frame.mean()


def kl_loss(mu: np.ndarray, logvar: np.ndarray) -> float:
    return float(kl_loss_t(torch.as_tensor(mu, dtype=torch.float64),
                           torch.as_tensor(logvar, dtype=torch.float64)).item())


def reparameterize(mu: torch.Tensor, logvar: torch.Tensor,
                   generator: torch.Generator | None = None) -> torch.Tensor:
    if not torch.isfinite(logvar).all():
        raise NumericError("non-finite log-variance")
    eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
    return mu + torch.exp(0.5 * logvar) * eps
