"""Per-timestep optimization of the learnable noun embeddings.

At each denoising step the noun-slot embeddings are updated until every
applicable loss falls below its gradually tightening threshold (an
exponential in the timestep), or an iteration cap is hit. Only the noun
slots change; the rest of the prompt, the null embeddings and the model
itself are untouched.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch

from .attention import aggregate, token_map
from .backends.base import Backend, LatentCode
from .config import LossWeights, ThresholdSchedule, TokenOptConfig
from .errors import NumericalFailureError
from .losses import LossBreakdown, gaussian_kernel, threshold_at, total_loss


@dataclass
class DynamicTokenSet:
    """Learnable embeddings for the noun slots at one timestep."""

    tokens: dict[int, torch.Tensor]  # noun position -> (embed_dim,)
    timestep: int

    def __post_init__(self):
        if not self.tokens:
            raise ValueError("token set must hold at least one noun")
        for pos, emb in self.tokens.items():
            if not torch.isfinite(emb).all():
                raise ValueError(f"token at position {pos} has non-finite values")

    @property
    def positions(self) -> tuple[int, ...]:
        return tuple(self.tokens.keys())

    def detached(self, timestep: Optional[int] = None) -> "DynamicTokenSet":
        t = self.timestep if timestep is None else timestep
        return DynamicTokenSet(
            tokens={p: v.detach().clone() for p, v in self.tokens.items()},
            timestep=t,
        )

    def stacked(self) -> torch.Tensor:
        return torch.stack([self.tokens[p] for p in self.positions])


def initial_token_set(backend: Backend, prompt: str, noun_words: Sequence[str],
                      timestep: int) -> DynamicTokenSet:
    """Seed the noun slots with the stock embeddings of the original words."""
    seq = backend.encode_prompt(prompt, noun_words=noun_words)
    tokens = {
        pos: backend.stock_token_embedding(word)
        for pos, word in zip(seq.noun_positions, noun_words)
    }
    return DynamicTokenSet(tokens=tokens, timestep=timestep)


def thresholds_at(t: int, sched: ThresholdSchedule,
                  num_steps: Optional[int] = None) -> tuple[float, float, float]:
    """(balance, disjoint, background) thresholds at timestep t."""
    idx = t
    if sched.reverse_index:
        if num_steps is None:
            raise ValueError("reverse_index needs the total step count")
        idx = num_steps - t
    return (
        threshold_at(idx, sched.beta_balance, sched.alpha_balance),
        threshold_at(idx, sched.beta_disjoint, sched.alpha_disjoint),
        threshold_at(idx, sched.beta_background, sched.alpha_background),
    )


def _below_thresholds(breakdown: LossBreakdown, ths: tuple[float, float, float]) -> bool:
    th_at, th_dj, th_bg = ths
    if breakdown.balance is not None and float(breakdown.balance) >= th_at:
        return False
    if breakdown.disjoint is not None and float(breakdown.disjoint) >= th_dj:
        return False
    return breakdown.background is None or float(breakdown.background) < th_bg


@dataclass
class TokenOptResult:
    tokens: DynamicTokenSet
    iterations: int
    converged: bool
    cap_hit: bool
    final_losses: dict[str, Optional[float]] = field(default_factory=dict)


def noun_attention_maps(backend: Backend, z: LatentCode, t: int, prompt: str,
                        noun_words: Sequence[str], tokens: DynamicTokenSet,
                        resolution: int = 16):
    """Aggregated per-noun maps from the conditional branch at one timestep."""
    cond = backend.encode_prompt(prompt, noun_words=noun_words, overrides=tokens.tokens)
    out = backend.predict_noise(z, t, cond, record_attention=True, record_kinds=("cross",))
    cross = aggregate(out.recorded_attention, resolution, "cross")
    return [token_map(cross, pos) for pos in tokens.positions]


def optimize_tokens_at_t(
    backend: Backend,
    z_bar_t: LatentCode,
    t: int,
    prompt: str,
    noun_words: Sequence[str],
    tokens: DynamicTokenSet,
    background: Optional[torch.Tensor],
    weights: LossWeights,
    thresholds: ThresholdSchedule,
    config: Optional[TokenOptConfig] = None,
    resolution: int = 16,
    gaussian_sigma: float = 0.5,
    gaussian_size: int = 3,
) -> TokenOptResult:
    """Run the gated inner loop for one timestep and return the updated tokens.

    The loop re-encodes the prompt with the current embeddings every
    iteration, so backends whose text encoder mixes token representations
    stay consistent.
    """
    cfg = config or TokenOptConfig()
    kernel = gaussian_kernel(gaussian_size, gaussian_sigma)
    ths = thresholds_at(t, thresholds, num_steps=backend.schedule.num_steps)
    positions = tokens.positions

    def evaluate(current: dict[int, torch.Tensor]) -> LossBreakdown:
        ts = DynamicTokenSet(tokens=dict(current), timestep=t)
        maps = noun_attention_maps(backend, z_bar_t, t, prompt, noun_words, ts, resolution)
        return total_loss(maps, background, weights, kernel=kernel)

    with torch.no_grad():
        breakdown = evaluate(tokens.tokens)
    if _below_thresholds(breakdown, ths):
        return TokenOptResult(tokens=tokens, iterations=0, converged=True, cap_hit=False,
                              final_losses=breakdown.detach_floats())

    params = {p: tokens.tokens[p].detach().clone().requires_grad_(True) for p in positions}
    optimizer = torch.optim.Adam(list(params.values()), lr=cfg.learning_rate)
    iterations = 0
    converged = False
    for _ in range(cfg.max_iterations):
        optimizer.zero_grad()
        breakdown = evaluate(params)
        breakdown.total.backward()
        for p in positions:
            grad = params[p].grad
            if grad is None or not torch.isfinite(grad).all():
                raise NumericalFailureError(f"non-finite token gradient at t={t}")
        optimizer.step()
        iterations += 1
        with torch.no_grad():
            breakdown = evaluate(params)
        if _below_thresholds(breakdown, ths):
            converged = True
            break

    cap_hit = not converged
    if cap_hit:
        warnings.warn(
            f"token optimization hit the {cfg.max_iterations}-iteration cap at t={t}",
            RuntimeWarning,
        )
    result_tokens = DynamicTokenSet(
        tokens={p: params[p].detach().clone() for p in positions},
        timestep=t,
    )
    return TokenOptResult(tokens=result_tokens, iterations=iterations, converged=converged,
                          cap_hit=cap_hit, final_losses=breakdown.detach_floats())
