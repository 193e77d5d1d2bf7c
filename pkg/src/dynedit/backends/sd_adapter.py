"""Stable Diffusion checkpoint adapter.

Wraps a diffusers UNet/VAE/CLIP stack behind the same backend interface
the synthetic model implements. Requires the `real` extra (diffusers,
transformers) and a local checkpoint or hub id; everything is imported
lazily so the core package works without them.

Attention is captured by swapping in recording processors on the UNet's
attention modules. Which layers contribute to the canonical aggregated
maps is configurable; by default every cross-attention layer whose
spatial size matches a canonical resolution is included.
"""
from __future__ import annotations

import math
from typing import Mapping, Optional, Sequence

import numpy as np
import torch

from .base import (
    AttentionController,
    AttentionRecord,
    BackendOutput,
    LatentCode,
    NoiseSchedule,
    TextEmbeddingSequence,
)

_DEFAULT_MODEL = "CompVis/stable-diffusion-v1-4"


def _require_real_deps():
    try:
        import diffusers  # noqa: F401
        import transformers  # noqa: F401
    except ImportError as exc:
        raise ImportError(
            "the real backend needs the optional dependencies; install with "
            "`pip install dynedit[real]` and provide a checkpoint"
        ) from exc


class _RecordingProcessor:
    """Attention processor that exposes probabilities to a per-call hook."""

    def __init__(self, layer_id: str, kind: str, sink):
        self.layer_id = layer_id
        self.kind = kind
        self.sink = sink

    def __call__(self, attn, hidden_states, encoder_hidden_states=None,
                 attention_mask=None, **kwargs):
        residual = hidden_states
        is_cross = encoder_hidden_states is not None
        context = encoder_hidden_states if is_cross else hidden_states

        query = attn.head_to_batch_dim(attn.to_q(hidden_states))
        key = attn.head_to_batch_dim(attn.to_k(context))
        value = attn.head_to_batch_dim(attn.to_v(context))
        attention_mask = attn.prepare_attention_mask(
            attention_mask, context.shape[1], hidden_states.shape[0])
        probs = attn.get_attention_scores(query, key, attention_mask)
        probs = self.sink(self.layer_id, self.kind, probs)
        hidden_states = attn.batch_to_head_dim(torch.bmm(probs, value))
        hidden_states = attn.to_out[0](hidden_states)
        hidden_states = attn.to_out[1](hidden_states)
        if attn.residual_connection:
            hidden_states = hidden_states + residual
        return hidden_states / attn.rescale_output_factor


class StableDiffusionBackend:
    """Real-checkpoint backend; satisfies the same protocol as the synthetic one."""

    def __init__(
        self,
        checkpoint: Optional[str] = None,
        num_steps: int = 50,
        device: str = "cpu",
        dtype: torch.dtype = torch.float32,
        attention_layers: Optional[Sequence[str]] = None,
        canonical_resolutions: tuple[int, ...] = (8, 16, 32, 64),
    ):
        _require_real_deps()
        from diffusers import AutoencoderKL, DDIMScheduler, UNet2DConditionModel
        from transformers import CLIPTextModel, CLIPTokenizer

        source = checkpoint or _DEFAULT_MODEL
        self.device = torch.device(device)
        self.dtype = dtype
        self.tokenizer = CLIPTokenizer.from_pretrained(source, subfolder="tokenizer")
        self.text_encoder = CLIPTextModel.from_pretrained(source, subfolder="text_encoder")
        self.vae = AutoencoderKL.from_pretrained(source, subfolder="vae")
        self.unet = UNet2DConditionModel.from_pretrained(source, subfolder="unet")
        for module in (self.text_encoder, self.vae, self.unet):
            module.to(self.device, dtype=self.dtype)
            module.eval()
            module.requires_grad_(False)

        self._scheduler = DDIMScheduler.from_pretrained(source, subfolder="scheduler")
        self._scheduler.set_timesteps(num_steps)
        # Map the ladder indices 1..T onto the scheduler's training timesteps
        # and expose the matching alpha_bar values (index 0 is the clean image).
        ts = list(reversed(self._scheduler.timesteps.tolist()))
        self._train_timesteps = [0] + ts
        alphas = self._scheduler.alphas_cumprod.to(torch.float64)
        alpha_bar = torch.tensor(
            [1.0] + [float(alphas[t]) for t in ts], dtype=torch.float64)
        # Guard against schedules whose first entry is not exactly 1.
        alpha_bar[0] = min(1.0, max(float(alphas[0]), float(alpha_bar[1])) + 1e-6)
        alpha_bar[0] = 1.0 if alpha_bar[0] > 1 else alpha_bar[0]
        self.schedule = NoiseSchedule(alpha_bar=alpha_bar)

        self.attention_layers = set(attention_layers) if attention_layers else None
        self.canonical_resolutions = canonical_resolutions
        sample = self.unet.config.sample_size
        self._latent_shape = (self.unet.config.in_channels, sample, sample)
        self._image_size = sample * 8

    # ------------------------------------------------------------------

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return self._latent_shape

    @property
    def embed_dim(self) -> int:
        return self.text_encoder.config.hidden_size

    @property
    def sequence_length(self) -> int:
        return self.tokenizer.model_max_length

    def _word_spans(self, prompt: str) -> dict[int, tuple[int, ...]]:
        words = prompt.strip().lower().split()
        spans: dict[int, tuple[int, ...]] = {}
        cursor = 1  # skip BOS
        for i, word in enumerate(words):
            n = len(self.tokenizer(word, add_special_tokens=False).input_ids)
            spans[i] = tuple(range(cursor, cursor + n))
            cursor += n
        return spans

    def _run_text_encoder(self, input_ids: torch.Tensor,
                          inputs_embeds: Optional[torch.Tensor] = None) -> torch.Tensor:
        text_model = self.text_encoder.text_model
        if inputs_embeds is None:
            hidden = text_model.embeddings(input_ids=input_ids)
        else:
            seq_len = inputs_embeds.shape[1]
            position_ids = getattr(text_model.embeddings, "position_ids", None)
            if position_ids is None:
                position_ids = torch.arange(seq_len, device=inputs_embeds.device)[None]
            pos = text_model.embeddings.position_embedding(position_ids[:, :seq_len])
            hidden = inputs_embeds + pos
        mask = torch.full((hidden.shape[1], hidden.shape[1]), torch.finfo(hidden.dtype).min,
                          device=hidden.device, dtype=hidden.dtype).triu(1)
        out = text_model.encoder(
            inputs_embeds=hidden, causal_attention_mask=mask[None, None])
        return text_model.final_layer_norm(out.last_hidden_state)

    def encode_prompt(
        self,
        prompt: str,
        noun_words: Optional[Sequence[str]] = None,
        overrides: Optional[Mapping[int, torch.Tensor]] = None,
    ) -> TextEmbeddingSequence:
        if not prompt.strip():
            raise ValueError("prompt must be non-empty")
        tokens = self.tokenizer(prompt, padding="max_length",
                                max_length=self.tokenizer.model_max_length,
                                truncation=True, return_tensors="pt")
        input_ids = tokens.input_ids.to(self.device)
        spans = self._word_spans(prompt)
        words = prompt.strip().lower().split()

        noun_positions: list[int] = []
        if noun_words:
            used: set[int] = set()
            for noun in noun_words:
                idx = next((i for i, w in enumerate(words)
                            if w == noun.lower() and i not in used), None)
                if idx is None:
                    raise ValueError(f"noun {noun!r} does not occur in prompt {prompt!r}")
                used.add(idx)
                noun_positions.append(spans[idx][0])

        if overrides:
            token_embeds = self.text_encoder.text_model.embeddings.token_embedding(input_ids)
            for pos, emb in overrides.items():
                if pos not in noun_positions:
                    raise ValueError(f"override position {pos} is not a noun position")
                token_embeds[0, pos] = emb.to(self.device, dtype=token_embeds.dtype)
            hidden = self._run_text_encoder(input_ids, inputs_embeds=token_embeds)
        else:
            hidden = self._run_text_encoder(input_ids)
        return TextEmbeddingSequence(
            embeddings=hidden[0],
            token_spans=spans,
            noun_positions=tuple(noun_positions),
        )

    def encode_null(self) -> TextEmbeddingSequence:
        tokens = self.tokenizer("", padding="max_length",
                                max_length=self.tokenizer.model_max_length,
                                return_tensors="pt")
        hidden = self._run_text_encoder(tokens.input_ids.to(self.device))
        return TextEmbeddingSequence(embeddings=hidden[0])

    def stock_token_embedding(self, word: str) -> torch.Tensor:
        ids = self.tokenizer(word, add_special_tokens=False).input_ids
        if not ids:
            raise ValueError(f"word {word!r} produced no tokens")
        table = self.text_encoder.text_model.embeddings.token_embedding
        return table(torch.tensor([ids[0]], device=self.device))[0].detach().clone()

    # ------------------------------------------------------------------

    def _install_processors(self, sink):
        processors = {}
        for name in self.unet.attn_processors:
            kind = "cross" if "attn2" in name else "self"
            processors[name] = _RecordingProcessor(name.replace(".processor", ""), kind, sink)
        self.unet.set_attn_processor(processors)

    def predict_noise(
        self,
        z: LatentCode,
        t: int,
        cond: TextEmbeddingSequence,
        record_attention: bool = False,
        record_kinds: Sequence[str] = ("cross", "self"),
        controller: Optional[AttentionController] = None,
    ) -> BackendOutput:
        if tuple(z.data.shape) != self._latent_shape:
            raise ValueError(f"latent shape {tuple(z.data.shape)} != {self._latent_shape}")
        if not 1 <= t <= self.schedule.num_steps:
            raise ValueError(f"timestep {t} outside [1, {self.schedule.num_steps}]")
        records: list[AttentionRecord] = []

        def sink(layer_id: str, kind: str, probs: torch.Tensor) -> torch.Tensor:
            pixels = probs.shape[1]
            res = int(math.isqrt(pixels))
            if res * res != pixels or res not in self.canonical_resolutions:
                return probs
            if self.attention_layers is not None and layer_id not in self.attention_layers:
                return probs
            record = AttentionRecord(layer_id=layer_id, kind=kind, resolution=res,
                                     num_heads=probs.shape[0], timestep=t, probs=probs)
            if controller is not None:
                probs = controller(probs, record)
                record = AttentionRecord(layer_id=layer_id, kind=kind, resolution=res,
                                         num_heads=probs.shape[0], timestep=t, probs=probs)
            if record_attention and kind in record_kinds:
                records.append(record)
            return probs

        self._install_processors(sink)
        latent = z.data.to(self.device, dtype=self.dtype)[None]
        embeddings = cond.embeddings.to(self.device, dtype=self.dtype)[None]
        train_t = self._train_timesteps[t]
        noise = self.unet(latent, train_t, encoder_hidden_states=embeddings).sample[0]
        return BackendOutput(noise_prediction=noise.to(torch.float64),
                             recorded_attention=tuple(records))

    # ------------------------------------------------------------------

    def encode_image(self, image) -> LatentCode:
        arr = np.asarray(image, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[-1] != 3:
            raise ValueError("expected an RGB image array (height, width, 3)")
        if arr.shape[0] != self._image_size or arr.shape[1] != self._image_size:
            raise ValueError(f"image must be {self._image_size}x{self._image_size}")
        tensor = torch.from_numpy(arr / 127.5 - 1.0).permute(2, 0, 1)[None]
        tensor = tensor.to(self.device, dtype=self.dtype)
        with torch.no_grad():
            posterior = self.vae.encode(tensor).latent_dist
            latent = posterior.mean * self.vae.config.scaling_factor
        return LatentCode(data=latent[0].to(torch.float64), timestep_index=0)

    def decode_latent(self, z: LatentCode) -> np.ndarray:
        latent = z.data.to(self.device, dtype=self.dtype)[None] / self.vae.config.scaling_factor
        with torch.no_grad():
            image = self.vae.decode(latent).sample[0]
        image = ((image + 1.0) * 127.5).clamp(0, 255).permute(1, 2, 0)
        return image.to(torch.uint8).cpu().numpy()
