"""Domain types and the pluggable diffusion-backend interface.

A backend hides the denoiser, text encoder, image autoencoder and noise
schedule behind a handful of methods. Instances are immutable after
construction and safe for concurrent read-only prediction; attention
records are created fresh per call, never shared.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Protocol, Sequence, runtime_checkable

import torch


@dataclass(frozen=True)
class LatentCode:
    """A latent-space tensor tagged with its position on the diffusion ladder."""

    data: torch.Tensor  # (channels, height, width)
    timestep_index: int

    def __post_init__(self):
        if self.data.dim() != 3:
            raise ValueError("latent data must have shape (channels, height, width)")
        if not torch.isfinite(self.data).all():
            raise ValueError("latent data must be finite")

    def with_data(self, data: torch.Tensor, timestep_index: Optional[int] = None) -> "LatentCode":
        t = self.timestep_index if timestep_index is None else timestep_index
        return LatentCode(data=data, timestep_index=t)


@dataclass(frozen=True)
class TextEmbeddingSequence:
    """Contextualized prompt embeddings plus the word-to-token bookkeeping."""

    embeddings: torch.Tensor  # (sequence_length, embed_dim)
    token_spans: Mapping[int, tuple[int, ...]] = field(default_factory=dict)
    noun_positions: tuple[int, ...] = ()

    def __post_init__(self):
        if self.embeddings.dim() != 2:
            raise ValueError("embeddings must have shape (sequence_length, embed_dim)")
        seen = set()
        for pos in self.noun_positions:
            if pos < 0 or pos >= self.embeddings.shape[0]:
                raise ValueError(f"noun position {pos} outside sequence")
            if pos in seen:
                raise ValueError("noun positions must be pairwise disjoint")
            seen.add(pos)

    @property
    def sequence_length(self) -> int:
        return self.embeddings.shape[0]


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal levels alpha_bar[0..T], strictly decreasing in (0, 1]."""

    alpha_bar: torch.Tensor

    def __post_init__(self):
        ab = self.alpha_bar
        if ab.dim() != 1 or ab.shape[0] < 2:
            raise ValueError("alpha_bar must be a 1-d array of length T+1")
        if not ((ab > 0).all() and (ab <= 1).all()):
            raise ValueError("alpha_bar values must lie in (0, 1]")
        if not (ab[1:] < ab[:-1]).all():
            raise ValueError("alpha_bar must be strictly decreasing")

    @property
    def num_steps(self) -> int:
        return self.alpha_bar.shape[0] - 1

    def signal(self, t: int) -> torch.Tensor:
        """sqrt(alpha_bar[t])"""
        return torch.sqrt(self.alpha_bar[t])

    def noise(self, t: int) -> torch.Tensor:
        """sqrt(1 - alpha_bar[t])"""
        return torch.sqrt(1.0 - self.alpha_bar[t])


@dataclass(frozen=True)
class AttentionRecord:
    """Raw post-softmax attention from one layer of one denoiser call.

    probs has shape (heads, pixels, tokens) for cross attention and
    (heads, pixels, pixels) for self attention. Tensors may stay attached
    to the autograd graph; callers that do not need gradients run the
    prediction under torch.no_grad().
    """

    layer_id: str
    kind: str  # "cross" | "self"
    resolution: int
    num_heads: int
    timestep: int
    probs: torch.Tensor


@dataclass(frozen=True)
class BackendOutput:
    noise_prediction: torch.Tensor
    recorded_attention: tuple[AttentionRecord, ...] = ()


# Controller hook applied to each attention map before the backend consumes
# it; receives (probs, record metadata) and returns possibly-modified probs.
AttentionController = Callable[[torch.Tensor, AttentionRecord], torch.Tensor]


@runtime_checkable
class Backend(Protocol):
    """What the rest of the pipeline needs from a diffusion model."""

    schedule: NoiseSchedule

    @property
    def latent_shape(self) -> tuple[int, int, int]: ...

    @property
    def embed_dim(self) -> int: ...

    @property
    def sequence_length(self) -> int: ...

    def encode_prompt(
        self,
        prompt: str,
        noun_words: Optional[Sequence[str]] = None,
        overrides: Optional[Mapping[int, torch.Tensor]] = None,
    ) -> TextEmbeddingSequence: ...

    def encode_null(self) -> TextEmbeddingSequence: ...

    def stock_token_embedding(self, word: str) -> torch.Tensor: ...

    def predict_noise(
        self,
        z: LatentCode,
        t: int,
        cond: TextEmbeddingSequence,
        record_attention: bool = False,
        record_kinds: Sequence[str] = ("cross", "self"),
        controller: Optional[AttentionController] = None,
    ) -> BackendOutput: ...

    def encode_image(self, image) -> LatentCode: ...

    def decode_latent(self, z: LatentCode): ...
