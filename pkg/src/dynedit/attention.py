"""Cross- and self-attention maps: computation, aggregation, token slices.

Maps are stored per timestep. The pipeline works with cross attention at
16x16 and self attention at 32x32; aggregation averages uniformly over
heads and over every recorded layer whose spatial size matches the
requested resolution.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch

from .backends.base import AttentionRecord
from .errors import NotFoundError


@dataclass(frozen=True)
class CrossAttentionMap:
    """Pixels-by-tokens attention weights; row i gives token weights for pixel i."""

    values: torch.Tensor  # (pixels, tokens)
    timestep: int
    normalized: bool = True

    def __post_init__(self):
        if self.values.dim() != 2:
            raise ValueError("cross-attention values must be 2-d (pixels, tokens)")

    @property
    def resolution(self) -> int:
        res = math.isqrt(self.values.shape[0])
        if res * res != self.values.shape[0]:
            raise ValueError("pixel count is not a perfect square; map has no grid shape")
        return res

    @property
    def num_tokens(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class SelfAttentionMap:
    """Pixels-by-pixels attention; rows sum to one."""

    values: torch.Tensor  # (pixels, pixels)
    timestep: int

    def __post_init__(self):
        if self.values.dim() != 2 or self.values.shape[0] != self.values.shape[1]:
            raise ValueError("self-attention values must be square (pixels, pixels)")

    @property
    def resolution(self) -> int:
        return math.isqrt(self.values.shape[0])


@dataclass(frozen=True)
class TokenAttention:
    """One token's spatial attention map."""

    map: torch.Tensor  # (resolution, resolution)
    token_position: int

    def __post_init__(self):
        if self.map.dim() != 2 or self.map.shape[0] != self.map.shape[1]:
            raise ValueError("token attention must be square")

    @property
    def resolution(self) -> int:
        return self.map.shape[0]

    def flatten(self) -> torch.Tensor:
        return self.map.reshape(-1)


def compute_attention(query: torch.Tensor, key: torch.Tensor, dim: int,
                      timestep: int = 0) -> CrossAttentionMap:
    """softmax(Q K^T / sqrt(dim)) over the token axis."""
    if dim <= 0:
        raise ValueError("dim must be positive")
    if query.dim() != 2 or key.dim() != 2 or query.shape[1] != key.shape[1]:
        raise ValueError("query and key inner dimensions must agree")
    logits = query @ key.T / math.sqrt(dim)
    return CrossAttentionMap(values=torch.softmax(logits, dim=-1), timestep=timestep)


def aggregate(records: Sequence[AttentionRecord], resolution: int,
              kind: str = "cross") -> CrossAttentionMap | SelfAttentionMap:
    """Uniform mean over heads and layers recorded at the given resolution."""
    selected = [r for r in records if r.kind == kind and r.resolution == resolution]
    if not selected:
        raise NotFoundError(f"no {kind} attention recorded at resolution {resolution}")
    stacked = torch.cat([r.probs.reshape(-1, *r.probs.shape[-2:]) for r in selected], dim=0)
    mean = stacked.mean(dim=0)
    timestep = selected[0].timestep
    if kind == "self":
        return SelfAttentionMap(values=mean, timestep=timestep)
    return CrossAttentionMap(values=mean, timestep=timestep)


def token_map(attention: CrossAttentionMap, position: int) -> TokenAttention:
    """Extract one token's column, reshaped to (resolution, resolution)."""
    if not 0 <= position < attention.num_tokens:
        raise ValueError(f"token position {position} outside [0, {attention.num_tokens})")
    res = attention.resolution
    return TokenAttention(
        map=attention.values[:, position].reshape(res, res),
        token_position=position,
    )
