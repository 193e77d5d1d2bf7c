"""Deterministic synthetic diffusion backend for tests and CPU-scale runs.

The "denoiser" is a fixed seeded affine map of the latent, a smooth
positional encoding of the timestep, and the mean prompt embedding, plus
a small readout of the coarsest cross-attention layer so that attention
injection has an observable effect on sampling. Attention follows the
usual scaled dot-product form: per-pixel features (a linear map of the
nearest-upsampled latent plus a fixed positional field) are projected to
queries, prompt embeddings to keys.

Everything runs in float64. The latent-dependent gains are deliberately
tiny so a DDIM invert/sample round trip reconstructs trajectories to
~1e-6 relative error, while the conditioning gain stays large enough for
null-text and token optimization to have real work to do.

The text encoder is a pure lookup table: each word maps to a fixed
seeded embedding row, so encoded sequences equal the table rows and
overrides replace rows verbatim.
"""
from __future__ import annotations

import hashlib
import math
from typing import Mapping, Optional, Sequence

import numpy as np
import torch

from ..config import SyntheticBackendConfig
from .base import (
    AttentionController,
    AttentionRecord,
    BackendOutput,
    LatentCode,
    NoiseSchedule,
    TextEmbeddingSequence,
)

_BOS = "<|start|>"
_PAD = "<|pad|>"
_TIME_DIM = 8


def linear_signal_schedule(num_steps: int, final_signal_level: float) -> NoiseSchedule:
    """alpha_bar with sqrt(alpha_bar) decaying linearly from 1 to the final level."""
    if not 0.0 < final_signal_level < 1.0:
        raise ValueError("final_signal_level must lie in (0, 1)")
    t = torch.arange(num_steps + 1, dtype=torch.float64)
    signal = 1.0 - (1.0 - final_signal_level) * t / num_steps
    return NoiseSchedule(alpha_bar=signal**2)


def _seeded(generator: torch.Generator, *shape: int) -> torch.Tensor:
    return torch.randn(*shape, generator=generator, dtype=torch.float64)


def _word_seed(master_seed: int, word: str) -> int:
    digest = hashlib.sha256(f"{master_seed}:{word}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class SyntheticBackend:
    """Closed-form, differentiable, CPU-fast stand-in for a latent diffusion model."""

    def __init__(self, config: Optional[SyntheticBackendConfig] = None, num_steps: int = 50):
        self.config = config or SyntheticBackendConfig()
        cfg = self.config
        self.schedule = linear_signal_schedule(num_steps, cfg.final_signal_level)
        self._latent_shape = (cfg.latent_channels, cfg.latent_size, cfg.latent_size)
        self._head_dim = cfg.embed_dim // cfg.num_heads
        if self._head_dim * cfg.num_heads != cfg.embed_dim:
            raise ValueError("embed_dim must be divisible by num_heads")

        gen = torch.Generator().manual_seed(cfg.seed)
        d = cfg.embed_dim
        c = cfg.latent_channels
        n_latent = c * cfg.latent_size**2

        self._embed_center = _seeded(gen, d)
        self._feature_proj = {}
        self._position_field = {}
        self._wq = {}
        resolutions = sorted(set(cfg.cross_resolutions) | {cfg.self_resolution})
        for res in resolutions:
            self._feature_proj[res] = _seeded(gen, d, c) / math.sqrt(c)
            self._position_field[res] = _seeded(gen, res * res, d) * cfg.feature_position_scale
            self._wq[res] = _seeded(gen, d, d) / math.sqrt(d)
        self._wk = _seeded(gen, d, d) / math.sqrt(d)
        self._wv = _seeded(gen, d, d) / math.sqrt(d)
        self._wsq = _seeded(gen, d, d) / math.sqrt(d)
        self._wsk = _seeded(gen, d, d) / math.sqrt(d)

        self._w_latent = _seeded(gen, n_latent, n_latent) / math.sqrt(n_latent)
        self._w_time = _seeded(gen, n_latent, _TIME_DIM) / math.sqrt(_TIME_DIM)
        self._w_cond = _seeded(gen, n_latent, d) / math.sqrt(d)
        readout_dim = cfg.cross_resolutions[0] ** 2 * d
        self._w_readout = _seeded(gen, n_latent, readout_dim) / math.sqrt(readout_dim)
        self._bias = _seeded(gen, n_latent)

    @classmethod
    def zeroed(cls, num_steps: int = 50, seed: int = 0) -> "SyntheticBackend":
        """Variant whose noise prediction is identically zero (attention intact)."""
        cfg = SyntheticBackendConfig(
            seed=seed,
            noise_gain_latent=0.0,
            noise_gain_time=0.0,
            noise_gain_cond=0.0,
            noise_gain_attention=0.0,
            noise_bias_scale=0.0,
        )
        return cls(cfg, num_steps=num_steps)

    # ------------------------------------------------------------------
    # text encoding

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return self._latent_shape

    @property
    def embed_dim(self) -> int:
        return self.config.embed_dim

    @property
    def sequence_length(self) -> int:
        return self.config.sequence_length

    def stock_token_embedding(self, word: str) -> torch.Tensor:
        gen = torch.Generator().manual_seed(_word_seed(self.config.seed, word.lower()))
        direction = _seeded(gen, self.config.embed_dim)
        direction = direction / direction.norm()
        return self._embed_center + self.config.embed_spread * direction * math.sqrt(self.config.embed_dim)

    def tokenize(self, prompt: str) -> list[str]:
        words = prompt.strip().lower().split()
        if not words:
            raise ValueError("prompt must be non-empty")
        if len(words) > self.config.sequence_length - 1:
            raise ValueError(
                f"prompt has {len(words)} words; backend supports at most "
                f"{self.config.sequence_length - 1}"
            )
        return words

    def _pad_embedding(self, position: int) -> torch.Tensor:
        # Distinct pad rows per position keep the padding keys from piling
        # onto one direction in attention space.
        return self.stock_token_embedding(f"{_PAD}:{position}")

    def encode_prompt(
        self,
        prompt: str,
        noun_words: Optional[Sequence[str]] = None,
        overrides: Optional[Mapping[int, torch.Tensor]] = None,
    ) -> TextEmbeddingSequence:
        words = self.tokenize(prompt)
        rows = [self.stock_token_embedding(_BOS)]
        rows += [self.stock_token_embedding(w) for w in words]
        rows += [self._pad_embedding(p)
                 for p in range(len(words) + 1, self.config.sequence_length)]

        token_spans = {i: (i + 1,) for i in range(len(words))}
        noun_positions: list[int] = []
        if noun_words:
            used: set[int] = set()
            for noun in noun_words:
                noun = noun.lower()
                pos = next(
                    (i + 1 for i, w in enumerate(words) if w == noun and (i + 1) not in used),
                    None,
                )
                if pos is None:
                    raise ValueError(f"noun {noun!r} does not occur in prompt {prompt!r}")
                used.add(pos)
                noun_positions.append(pos)

        if overrides:
            for pos, emb in overrides.items():
                if pos not in noun_positions:
                    raise ValueError(f"override position {pos} is not a noun position")
                emb = torch.as_tensor(emb, dtype=torch.float64)
                if emb.shape != (self.config.embed_dim,):
                    raise ValueError("override embedding has wrong shape")
                rows[pos] = emb

        embeddings = torch.stack(rows, dim=0)
        return TextEmbeddingSequence(
            embeddings=embeddings,
            token_spans=token_spans,
            noun_positions=tuple(noun_positions),
        )

    def encode_null(self) -> TextEmbeddingSequence:
        rows = [self.stock_token_embedding(_BOS)]
        rows += [self._pad_embedding(p) for p in range(1, self.config.sequence_length)]
        return TextEmbeddingSequence(embeddings=torch.stack(rows, dim=0))

    # ------------------------------------------------------------------
    # denoiser

    def _time_encoding(self, t: int) -> torch.Tensor:
        T = self.schedule.num_steps
        freqs = torch.arange(1, _TIME_DIM // 2 + 1, dtype=torch.float64)
        angle = math.pi * t / T * freqs
        return torch.cat([torch.sin(angle), torch.cos(angle)])

    def _pixel_features(self, z: torch.Tensor, res: int) -> torch.Tensor:
        size = self.config.latent_size
        if res % size != 0:
            raise ValueError(f"resolution {res} incompatible with latent size {size}")
        factor = res // size
        z_up = z.repeat_interleave(factor, dim=1).repeat_interleave(factor, dim=2)
        pixels = z_up.reshape(z.shape[0], res * res).transpose(0, 1)
        return pixels @ self._feature_proj[res].T + self._position_field[res]

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        n, _ = x.shape
        x = x.reshape(n, self.config.num_heads, self._head_dim).permute(1, 0, 2)
        # Unit-normalized projections bound the logits to [-gain, gain],
        # which keeps the softmax away from saturation no matter how far
        # an optimizer pushes an embedding.
        return x / (x.norm(dim=-1, keepdim=True) + 1e-12)

    def _cross_probs(self, feats: torch.Tensor, cond: torch.Tensor, res: int) -> torch.Tensor:
        q = self._heads(feats @ self._wq[res].T)
        # The shared embedding center is a bias common to every token; the
        # key projection removes it so key directions actually differ.
        k = self._heads((cond - self._embed_center) @ self._wk.T)
        logits = self.config.logit_gain * q @ k.transpose(1, 2)
        return torch.softmax(logits, dim=-1)

    def _self_probs(self, feats: torch.Tensor) -> torch.Tensor:
        q = self._heads(feats @ self._wsq.T)
        k = self._heads(feats @ self._wsk.T)
        logits = self.config.logit_gain * q @ k.transpose(1, 2)
        return torch.softmax(logits, dim=-1)

    def predict_noise(
        self,
        z: LatentCode,
        t: int,
        cond: TextEmbeddingSequence,
        record_attention: bool = False,
        record_kinds: Sequence[str] = ("cross", "self"),
        controller: Optional[AttentionController] = None,
    ) -> BackendOutput:
        """Pure function of (z, t, cond): repeated calls are bit-identical.

        Attention is recorded only when flagged; a controller sees (and may
        replace) every computed attention map before the noise readout.
        """
        cfg = self.config
        if z.data.shape != self._latent_shape:
            raise ValueError(f"latent shape {tuple(z.data.shape)} != {self._latent_shape}")
        if not 1 <= t <= self.schedule.num_steps:
            raise ValueError(f"timestep {t} outside [1, {self.schedule.num_steps}]")
        if cond.embeddings.shape != (cfg.sequence_length, cfg.embed_dim):
            raise ValueError("conditioning has wrong shape for this backend")

        zd = z.data.to(torch.float64)
        emb = cond.embeddings.to(torch.float64)
        records: list[AttentionRecord] = []

        def run_layer(kind: str, res: int, probs: torch.Tensor, keep: bool) -> torch.Tensor:
            record = AttentionRecord(
                layer_id=f"{kind}{res}", kind=kind, resolution=res,
                num_heads=cfg.num_heads, timestep=t, probs=probs,
            )
            if controller is not None:
                probs = controller(probs, record)
                record = AttentionRecord(
                    layer_id=record.layer_id, kind=kind, resolution=res,
                    num_heads=cfg.num_heads, timestep=t, probs=probs,
                )
            if keep:
                records.append(record)
            return probs

        want_cross = record_attention and "cross" in record_kinds
        want_self = record_attention and "self" in record_kinds

        readout_res = cfg.cross_resolutions[0]
        cross_probs_readout = None
        for res in cfg.cross_resolutions:
            if res != readout_res and not (want_cross or controller is not None):
                continue
            feats = self._pixel_features(zd, res)
            probs = run_layer("cross", res, self._cross_probs(feats, emb, res), keep=want_cross)
            if res == readout_res:
                cross_probs_readout = probs
        if want_self or (controller is not None and "self" in record_kinds):
            feats = self._pixel_features(zd, cfg.self_resolution)
            run_layer("self", cfg.self_resolution, self._self_probs(feats), keep=want_self)

        values = emb @ self._wv.T
        readout = (cross_probs_readout.mean(dim=0) @ values).reshape(-1)

        noise = (
            cfg.noise_gain_latent * (self._w_latent @ zd.reshape(-1))
            + cfg.noise_gain_time * (self._w_time @ self._time_encoding(t))
            + cfg.noise_gain_cond * (self._w_cond @ emb.mean(dim=0))
            + cfg.noise_gain_attention * (self._w_readout @ readout)
            + cfg.noise_bias_scale * self._bias
        )
        return BackendOutput(
            noise_prediction=noise.reshape(self._latent_shape),
            recorded_attention=tuple(records),
        )

    # ------------------------------------------------------------------
    # identity autoencoder

    def encode_image(self, image) -> LatentCode:
        arr = torch.as_tensor(np.asarray(image), dtype=torch.float64)
        if arr.shape != self._latent_shape:
            raise ValueError(f"image shape {tuple(arr.shape)} != {self._latent_shape}")
        return LatentCode(data=arr.clone(), timestep_index=0)

    def decode_latent(self, z: LatentCode) -> np.ndarray:
        return z.data.detach().to(torch.float64).numpy().copy()
