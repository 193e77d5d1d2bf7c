"""Deterministic DDIM stepping in both directions, plus classifier-free guidance.

Conventions: the step that moves a latent up the noise ladder
(z_t -> z_{t+1}) evaluates the denoiser at the destination timestep
t+1, the step that moves it down (z_t -> z_{t-1}) evaluates at the
source timestep t. Both directions therefore query the model with the
same timestep label at matched ladder positions, which is what makes
the invert/sample round trip tight.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch

from .attention import CrossAttentionMap, SelfAttentionMap, aggregate
from .backends.base import Backend, LatentCode, TextEmbeddingSequence


@dataclass
class LatentTrajectory:
    """Latents z_0..z_T from DDIM inversion; index 0 is the encoded image."""

    latents: list[LatentCode]
    guidance_scale_used: float

    def __post_init__(self):
        if not self.latents:
            raise ValueError("trajectory must not be empty")

    def __len__(self) -> int:
        return len(self.latents)

    def __getitem__(self, t: int) -> LatentCode:
        return self.latents[t]

    @property
    def num_steps(self) -> int:
        return len(self.latents) - 1


@dataclass
class InversionResult:
    trajectory: LatentTrajectory
    # Per-timestep aggregated cross attention (canonical resolution),
    # index i corresponds to the step that produced z_{i+1}.
    cross_maps: list[CrossAttentionMap] = field(default_factory=list)
    # Running mean of the canonical-resolution self attention over all steps.
    self_attention_mean: Optional[SelfAttentionMap] = None


def f_theta(backend: Backend, z: LatentCode, t: int,
            cond: TextEmbeddingSequence) -> LatentCode:
    """Predicted fully denoised latent: (z_t - sqrt(1-a_t) * eps) / sqrt(a_t)."""
    eps = backend.predict_noise(z, t, cond).noise_prediction
    sched = backend.schedule
    denoised = (z.data - sched.noise(t) * eps) / sched.signal(t)
    return LatentCode(data=denoised, timestep_index=0)


def cfg_predict(backend: Backend, z: LatentCode, t: int,
                cond: TextEmbeddingSequence, null_cond: TextEmbeddingSequence,
                w: float, **predict_kwargs) -> torch.Tensor:
    """w * eps(z,t,cond) + (1-w) * eps(z,t,null). w=1 and w=0 short-circuit."""
    if not torch.isfinite(torch.tensor(float(w))):
        raise ValueError("guidance scale must be finite")
    if w == 1.0:
        return backend.predict_noise(z, t, cond, **predict_kwargs).noise_prediction
    if w == 0.0:
        return backend.predict_noise(z, t, null_cond, **predict_kwargs).noise_prediction
    eps_cond = backend.predict_noise(z, t, cond, **predict_kwargs).noise_prediction
    eps_null = backend.predict_noise(z, t, null_cond).noise_prediction
    return w * eps_cond + (1.0 - w) * eps_null


def ddim_step_to(schedule, z: torch.Tensor, t_from: int, t_to: int,
                 eps: torch.Tensor) -> torch.Tensor:
    """Move a latent between adjacent noise levels given a noise estimate."""
    denoised = (z - schedule.noise(t_from) * eps) / schedule.signal(t_from)
    return schedule.signal(t_to) * denoised + schedule.noise(t_to) * eps


def ddim_invert_step(backend: Backend, z_t: LatentCode, t: int,
                     cond: TextEmbeddingSequence, **predict_kwargs) -> LatentCode:
    """One inversion step z_t -> z_{t+1}; valid for t in [0, T-1]."""
    T = backend.schedule.num_steps
    if not 0 <= t <= T - 1:
        raise ValueError(f"inversion step needs t in [0, {T - 1}], got {t}")
    eps = backend.predict_noise(z_t, t + 1, cond, **predict_kwargs).noise_prediction
    data = ddim_step_to(backend.schedule, z_t.data, t, t + 1, eps)
    return LatentCode(data=data, timestep_index=t + 1)


def ddim_sample_step(backend: Backend, z_t: LatentCode, t: int,
                     eps: torch.Tensor) -> LatentCode:
    """One sampling step z_t -> z_{t-1} given a (possibly guided) noise estimate."""
    T = backend.schedule.num_steps
    if not 1 <= t <= T:
        raise ValueError(f"sampling step needs t in [1, {T}], got {t}")
    data = ddim_step_to(backend.schedule, z_t.data, t, t - 1, eps)
    return LatentCode(data=data, timestep_index=t - 1)


def ddim_invert(
    backend: Backend,
    image,
    cond: TextEmbeddingSequence,
    record_attention: bool = True,
    cross_resolution: int = 16,
    self_resolution: int = 32,
) -> InversionResult:
    """Full inversion of an image at guidance w=1, recording attention on the way.

    The recorded cross maps (per timestep) and the time-averaged self map
    feed background estimation; recording can be disabled for speed.
    """
    z = backend.encode_image(image)
    latents = [z]
    cross_maps: list[CrossAttentionMap] = []
    self_sum: Optional[torch.Tensor] = None
    steps = 0
    with torch.no_grad():
        for t in range(backend.schedule.num_steps):
            if record_attention:
                out = backend.predict_noise(z, t + 1, cond, record_attention=True)
                cross_maps.append(aggregate(out.recorded_attention, cross_resolution, "cross"))
                self_map = aggregate(out.recorded_attention, self_resolution, "self")
                self_sum = self_map.values if self_sum is None else self_sum + self_map.values
                steps += 1
                eps = out.noise_prediction
            else:
                eps = backend.predict_noise(z, t + 1, cond).noise_prediction
            data = ddim_step_to(backend.schedule, z.data, t, t + 1, eps)
            z = LatentCode(data=data, timestep_index=t + 1)
            latents.append(z)
    result = InversionResult(
        trajectory=LatentTrajectory(latents=latents, guidance_scale_used=1.0),
        cross_maps=cross_maps,
    )
    if self_sum is not None:
        result.self_attention_mean = SelfAttentionMap(values=self_sum / steps, timestep=-1)
    return result


def ddim_sample(
    backend: Backend,
    z_T: LatentCode,
    cond: TextEmbeddingSequence,
    null_cond: Optional[TextEmbeddingSequence] = None,
    guidance_scale: float = 1.0,
    null_schedule: Optional[Sequence[torch.Tensor]] = None,
) -> list[LatentCode]:
    """Sample from z_T down to z_0; returns latents indexed by timestep (0..T)."""
    T = backend.schedule.num_steps
    if z_T.timestep_index != T:
        raise ValueError(f"sampling must start at timestep {T}")
    if guidance_scale != 1.0 and null_cond is None and null_schedule is None:
        raise ValueError("guided sampling needs a null conditioning")
    latents: list[Optional[LatentCode]] = [None] * (T + 1)
    latents[T] = z_T
    z = z_T
    with torch.no_grad():
        for t in range(T, 0, -1):
            null_t = null_cond
            if null_schedule is not None:
                null_t = TextEmbeddingSequence(embeddings=null_schedule[t - 1])
            if guidance_scale == 1.0:
                eps = backend.predict_noise(z, t, cond).noise_prediction
            else:
                eps = cfg_predict(backend, z, t, cond, null_t, guidance_scale)
            z = ddim_sample_step(backend, z, t, eps)
            latents[t - 1] = z
    return latents  # type: ignore[return-value]
