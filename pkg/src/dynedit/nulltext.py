"""Per-timestep null-embedding optimization.

At every DDIM step the unconditional ("null") embedding is tuned so the
classifier-free-guided step lands on the stored inversion trajectory.
The best iterate seen (including the starting point) is kept, so the
returned loss never exceeds the pre-optimization loss. With guidance
scale 1 the null branch has zero gradient and the embedding is returned
untouched.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import torch

from .backends.base import Backend, LatentCode, TextEmbeddingSequence
from .config import NullTextConfig
from .errors import NumericalFailureError
from .inversion import LatentTrajectory, ddim_step_to


@dataclass
class NullTextSchedule:
    """Optimized null embeddings for t = 1..T plus the final loss at each step."""

    embeddings: list[torch.Tensor]
    per_step_loss: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.embeddings)

    def conditioning(self, t: int) -> TextEmbeddingSequence:
        return TextEmbeddingSequence(embeddings=self.embeddings[t - 1])


@dataclass
class NullStepResult:
    z_prev: LatentCode
    null_embedding: torch.Tensor
    final_loss: float
    initial_loss: float
    iterations: int


def _guided_step(backend: Backend, z_t: LatentCode, t: int, eps_cond: torch.Tensor,
                 null_embedding: torch.Tensor, w: float) -> torch.Tensor:
    if w == 1.0:
        eps = eps_cond
    else:
        null_seq = TextEmbeddingSequence(embeddings=null_embedding)
        eps_null = backend.predict_noise(z_t, t, null_seq).noise_prediction
        eps = w * eps_cond + (1.0 - w) * eps_null
    return ddim_step_to(backend.schedule, z_t.data, t, t - 1, eps)


def nti_step(
    backend: Backend,
    z_bar_t: LatentCode,
    target_prev: LatentCode,
    t: int,
    cond: TextEmbeddingSequence,
    null_init: torch.Tensor,
    guidance_scale: float = 7.5,
    config: Optional[NullTextConfig] = None,
) -> NullStepResult:
    """Optimize the null embedding for one step and take the guided step with it."""
    cfg = config or NullTextConfig()
    with torch.no_grad():
        eps_cond = backend.predict_noise(z_bar_t, t, cond).noise_prediction

    null = null_init.detach().clone()

    def step_loss(embedding: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        z_prev = _guided_step(backend, z_bar_t, t, eps_cond, embedding, guidance_scale)
        return z_prev, torch.mean((z_prev - target_prev.data) ** 2)

    with torch.no_grad():
        z_prev0, loss0 = step_loss(null)
    initial_loss = float(loss0)
    if not torch.isfinite(loss0):
        raise NumericalFailureError(f"non-finite reconstruction loss at t={t}")

    best_loss = initial_loss
    best_null = null.clone()
    best_prev = z_prev0
    iterations = 0

    lr = cfg.learning_rate
    if cfg.learning_rate_decay:
        T = backend.schedule.num_steps
        lr = cfg.learning_rate * max(0.1, 1.0 - (T - t) / (2.0 * T))

    # w=1 makes the null branch gradient-free; skip the loop entirely.
    if guidance_scale != 1.0 and cfg.inner_iterations > 0 and initial_loss >= cfg.early_stop_loss:
        null.requires_grad_(True)
        optimizer = torch.optim.Adam([null], lr=lr)
        for _ in range(cfg.inner_iterations):
            optimizer.zero_grad()
            z_prev, loss = step_loss(null)
            if not torch.isfinite(loss):
                raise NumericalFailureError(f"non-finite reconstruction loss at t={t}")
            loss.backward()
            optimizer.step()
            iterations += 1
            with torch.no_grad():
                z_prev_new, loss_new = step_loss(null)
            if float(loss_new) < best_loss:
                best_loss = float(loss_new)
                best_null = null.detach().clone()
                best_prev = z_prev_new
            if best_loss < cfg.early_stop_loss:
                break

    return NullStepResult(
        z_prev=LatentCode(data=best_prev.detach(), timestep_index=t - 1),
        null_embedding=best_null,
        final_loss=best_loss,
        initial_loss=initial_loss,
        iterations=iterations,
    )


def nti_full(
    backend: Backend,
    trajectory: LatentTrajectory,
    cond: TextEmbeddingSequence,
    guidance_scale: float = 7.5,
    config: Optional[NullTextConfig] = None,
    null_init: Optional[torch.Tensor] = None,
) -> tuple[NullTextSchedule, LatentCode]:
    """Optimize null embeddings for every step, warm-starting each from the last.

    Returns the schedule and the final backward-trace latent (the z_0
    approximation reached by guided sampling with the optimized nulls).
    """
    T = trajectory.num_steps
    if null_init is None:
        null_init = backend.encode_null().embeddings
    null = null_init.detach().clone()
    embeddings: list[Optional[torch.Tensor]] = [None] * T
    losses = [0.0] * T
    z_bar = trajectory[T]
    for t in range(T, 0, -1):
        result = nti_step(backend, z_bar, trajectory[t - 1], t, cond, null,
                          guidance_scale=guidance_scale, config=config)
        embeddings[t - 1] = result.null_embedding
        losses[t - 1] = result.final_loss
        z_bar = result.z_prev
        null = result.null_embedding  # warm start for the next step down
    return NullTextSchedule(embeddings=embeddings, per_step_loss=losses), z_bar
