"""Shared transformer building blocks.

Layers carry their positional information through a depthwise convolution
on the input (convolutional relative positioning); no additive positional
encodings are used anywhere in the toolkit.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


class TransformerLayer(nn.Module):
    """Pre-LN transformer block with depthwise-conv positional mixing.

    causal=True masks attention to the past and left-pads the positional
    conv, so output frame t depends only on input frames <= t.
    """

    def __init__(self, width: int, heads: int = 4, ffn_mult: int = 4, causal: bool = False):
        super().__init__()
        self.causal = causal
        self.pos_conv = nn.Conv1d(width, width, kernel_size=3,
                                  groups=width, padding=0)
        self.ln1 = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.ln2 = nn.LayerNorm(width)
        self.ffn = nn.Sequential(
            nn.Linear(width, ffn_mult * width),
            nn.GELU(),
            nn.Linear(ffn_mult * width, width),
        )

    def _pos(self, x: torch.Tensor) -> torch.Tensor:
        h = x.transpose(1, 2)
        h = F.pad(h, (2, 0) if self.causal else (1, 1))
        return self.pos_conv(h).transpose(1, 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self._pos(x)
        h = self.ln1(x)
        mask = None
        if self.causal:
            t = x.shape[1]
            mask = torch.triu(torch.ones(t, t, dtype=torch.bool, device=x.device), 1)
        a, _ = self.attn(h, h, h, attn_mask=mask, need_weights=False)
        x = x + a
        return x + self.ffn(self.ln2(x))


def sinusoidal_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Standard sinusoidal embedding of scalar positions/times, (..., dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=t.dtype, device=t.device) / half
    )
    args = t[..., None] * freqs
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def flat_params(module: nn.Module) -> bytes:
    """Concatenated little-endian bytes of all parameters and buffers."""
    chunks = []
    for _, p in sorted(module.state_dict().items()):
        chunks.append(p.detach().cpu().contiguous().numpy().tobytes())
    return b"".join(chunks)
