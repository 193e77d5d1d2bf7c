"""Attention-repair losses over per-token cross-attention maps.

Three terms steer the learnable noun embeddings: pairwise cosine overlap
between token maps (disjointness), cosine overlap of each map with the
background mask, and a balancing term that penalizes the worst-localized
token (one minus the peak of its Gaussian-smoothed map). The cosine terms
are scale-invariant per map; all terms are non-negative for non-negative
maps.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn.functional as F

from .attention import TokenAttention
from .config import LossWeights
from .errors import DegenerateInputError


def _flat(maps: Sequence[TokenAttention]) -> list[torch.Tensor]:
    if not maps:
        raise ValueError("at least one token map required")
    shape = maps[0].map.shape
    out = []
    for m in maps:
        if m.map.shape != shape:
            raise ValueError("token maps must share one shape")
        out.append(m.flatten())
    return out


def _cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    na, nb = a.norm(), b.norm()
    if float(na.detach()) == 0.0 or float(nb.detach()) == 0.0:
        raise DegenerateInputError("cosine of a zero-norm map is undefined")
    return (a @ b) / (na * nb)


def loss_disjoint(maps: Sequence[TokenAttention]) -> torch.Tensor:
    """Sum of pairwise cosine similarities over ordered token pairs."""
    vecs = _flat(maps)
    if len(vecs) < 2:
        raise ValueError("disjointness needs at least two token maps")
    total = torch.zeros((), dtype=vecs[0].dtype)
    for i in range(len(vecs)):
        for j in range(len(vecs)):
            if i != j:
                total = total + _cosine(vecs[i], vecs[j])
    return total


def loss_background(maps: Sequence[TokenAttention], background: torch.Tensor) -> torch.Tensor:
    """Sum over tokens of the cosine between the token map and the background mask."""
    vecs = _flat(maps)
    bg = background.reshape(-1).to(vecs[0].dtype)
    if bg.shape != vecs[0].shape:
        raise ValueError("background mask shape does not match token maps")
    if float(bg.norm()) == 0.0:
        raise DegenerateInputError("background mask is empty")
    total = torch.zeros((), dtype=vecs[0].dtype)
    for v in vecs:
        total = total + _cosine(v, bg)
    return total


def gaussian_kernel(size: int = 3, sigma: float = 0.5) -> torch.Tensor:
    """Normalized 2-d Gaussian kernel (sums to one)."""
    if size < 1 or size % 2 == 0:
        raise ValueError("kernel size must be a positive odd integer")
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    kernel = g[:, None] * g[None, :]
    return kernel / kernel.sum()


def smooth(map2d: torch.Tensor, kernel: torch.Tensor) -> torch.Tensor:
    """Convolve with replicate padding so constants stay constant."""
    pad = kernel.shape[0] // 2
    x = map2d[None, None].to(torch.float64)
    x = F.pad(x, (pad, pad, pad, pad), mode="replicate")
    out = F.conv2d(x, kernel[None, None].to(torch.float64))
    return out[0, 0]


def loss_attention_balance(maps: Sequence[TokenAttention],
                           kernel: Optional[torch.Tensor] = None) -> torch.Tensor:
    """max over tokens of (1 - peak of the Gaussian-filtered map)."""
    if not maps:
        raise ValueError("at least one token map required")
    if kernel is None:
        kernel = gaussian_kernel()
    deficits = [1.0 - smooth(m.map, kernel).max() for m in maps]
    return torch.stack(deficits).max()


@dataclass
class LossBreakdown:
    """Weighted total plus each raw term.

    balance/disjoint are None when K=1 (they need two tokens);
    background is None when no usable mask was supplied.
    """

    total: torch.Tensor
    balance: Optional[torch.Tensor]
    disjoint: Optional[torch.Tensor]
    background: Optional[torch.Tensor]

    def detach_floats(self) -> dict[str, Optional[float]]:
        return {
            "total": float(self.total),
            "balance": None if self.balance is None else float(self.balance),
            "disjoint": None if self.disjoint is None else float(self.disjoint),
            "background": None if self.background is None else float(self.background),
        }


def total_loss(
    maps: Sequence[TokenAttention],
    background: Optional[torch.Tensor],
    weights: LossWeights,
    kernel: Optional[torch.Tensor] = None,
) -> LossBreakdown:
    """Weighted sum of the three terms.

    With a single learnable token only the background term applies; the
    other two need at least two tokens to mean anything. background=None
    drops the background term (a pipeline may have found no background).
    """
    bg = None if background is None else loss_background(maps, background)
    if len(maps) == 1:
        if bg is None:
            raise ValueError("a single token with no background mask leaves no loss to apply")
        return LossBreakdown(total=weights.background * bg, balance=None,
                             disjoint=None, background=bg)
    at = loss_attention_balance(maps, kernel=kernel)
    dj = loss_disjoint(maps)
    total = weights.balance * at + weights.disjoint * dj
    if bg is not None:
        total = total + weights.background * bg
    return LossBreakdown(total=total, balance=at, disjoint=dj, background=bg)


def threshold_at(t: int, beta: float, alpha: float) -> float:
    """beta * exp(-t / alpha)"""
    return beta * math.exp(-t / alpha)
