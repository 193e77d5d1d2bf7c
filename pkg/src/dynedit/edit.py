"""Prompt-to-prompt style editing on top of a persisted run.

Two sampling passes walk down from the stored final latent in lockstep,
sharing the learned null embeddings. The source pass re-creates the
original image using the learned noun embeddings; the target pass runs
the edited prompt and, inside the injection windows, receives the source
pass's attention (word swap and refinement replace aligned columns,
re-weighting scales selected columns). Outside the windows the target's
own attention passes through untouched.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
import torch

from .attention import CrossAttentionMap, aggregate
from .backends.base import AttentionRecord, Backend, LatentCode, TextEmbeddingSequence
from .config import RunConfig
from .inversion import ddim_sample_step
from .pipeline import LoadedRun, PipelineResult
from .tokenopt import DynamicTokenSet

MODES = ("word_swap", "refinement", "reweight")


@dataclass
class EditSpec:
    """Declarative description of one edit."""

    mode: str = "reweight"
    swap_map: dict[str, str] = field(default_factory=dict)
    appended_text: str = ""
    reweight_factors: dict[str | int, float] = field(default_factory=dict)
    cross_injection_fraction: float = 0.8
    self_injection_fraction: float = 0.4
    renormalize_after_reweight: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown edit mode {self.mode!r}")
        payloads = {
            "word_swap": bool(self.swap_map),
            "refinement": bool(self.appended_text),
            "reweight": bool(self.reweight_factors),
        }
        for mode, populated in payloads.items():
            if populated and mode != self.mode:
                raise ValueError(f"{mode} payload given but mode is {self.mode!r}")
        for frac in (self.cross_injection_fraction, self.self_injection_fraction):
            if not 0.0 <= frac <= 1.0:
                raise ValueError("injection fractions must lie in [0, 1]")

    @classmethod
    def identity(cls) -> "EditSpec":
        """No-op edit: the target pass reproduces the reconstruction exactly."""
        return cls(mode="reweight")

    @classmethod
    def from_dict(cls, data: Mapping) -> "EditSpec":
        kwargs = dict(data)
        factors = kwargs.get("reweight_factors")
        if factors:
            # JSON keys are strings; digit keys mean token positions.
            kwargs["reweight_factors"] = {
                (int(k) if isinstance(k, str) and k.isdigit() else k): float(v)
                for k, v in factors.items()
            }
        return cls(**kwargs)


def _lcs_pairs(a: Sequence[str], b: Sequence[str]) -> list[tuple[int, int]]:
    """Longest-common-subsequence word alignment as (index_a, index_b) pairs."""
    n, m = len(a), len(b)
    dp = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n - 1, -1, -1):
        for j in range(m - 1, -1, -1):
            if a[i] == b[j]:
                dp[i][j] = dp[i + 1][j + 1] + 1
            else:
                dp[i][j] = max(dp[i + 1][j], dp[i][j + 1])
    pairs = []
    i = j = 0
    while i < n and j < m:
        if a[i] == b[j]:
            pairs.append((i, j))
            i += 1
            j += 1
        elif dp[i + 1][j] >= dp[i][j + 1]:
            i += 1
        else:
            j += 1
    return pairs


@dataclass
class EditPlan:
    """An EditSpec compiled against a concrete source prompt and step count."""

    spec: EditSpec
    source_prompt: str
    target_prompt: str
    source_nouns: tuple[str, ...]
    target_nouns: tuple[str, ...]
    num_steps: int
    # Aligned (source token position, target token position) pairs.
    alignment: tuple[tuple[int, int], ...]
    # Target token positions to scale, with factors.
    reweight_positions: dict[int, float] = field(default_factory=dict)

    def in_cross_window(self, t: int) -> bool:
        return (self.num_steps - t) < self.spec.cross_injection_fraction * self.num_steps

    def in_self_window(self, t: int) -> bool:
        return (self.num_steps - t) < self.spec.self_injection_fraction * self.num_steps


def compile_edit(
    spec: EditSpec,
    source_prompt: str,
    source_nouns: Sequence[str],
    num_steps: int,
    source_cond: TextEmbeddingSequence,
    target_cond_builder,
) -> tuple[EditPlan, TextEmbeddingSequence]:
    """Resolve prompts, token alignment and reweight columns for an edit.

    target_cond_builder(prompt, nouns) must return the target sequence so
    alignment can use real token spans.
    """
    source_words = source_prompt.strip().lower().split()
    source_nouns = tuple(n.lower() for n in source_nouns)

    if spec.mode == "word_swap":
        for word in spec.swap_map:
            if word.lower() not in source_words:
                raise ValueError(f"swap source {word!r} does not occur in the prompt")
        target_words = [spec.swap_map.get(w, w) for w in source_words]
        target_prompt = " ".join(target_words)
        target_nouns = tuple(spec.swap_map.get(n, n) for n in source_nouns)
    elif spec.mode == "refinement":
        target_prompt = f"{source_prompt} {spec.appended_text}".strip()
        target_words = target_prompt.lower().split()
        target_nouns = source_nouns
    else:
        target_prompt = source_prompt
        target_words = list(source_words)
        target_nouns = source_nouns

    target_cond = target_cond_builder(target_prompt, target_nouns)

    if spec.mode == "word_swap":
        if len(target_words) != len(source_words):
            raise ValueError("word swap must keep the word count unchanged")
        # Index-wise alignment over the full sequence, start token included.
        pairs = [(p, p) for p in range(source_cond.sequence_length)]
    else:
        word_pairs = _lcs_pairs(source_words, target_words)
        pairs = [(0, 0)]
        for wi, wj in word_pairs:
            src_span = source_cond.token_spans.get(wi, ())
            tgt_span = target_cond.token_spans.get(wj, ())
            pairs.extend(zip(src_span, tgt_span))

    reweight_positions: dict[int, float] = {}
    for key, factor in spec.reweight_factors.items():
        if isinstance(key, int):
            pos = key
            if not 0 <= pos < target_cond.sequence_length:
                raise ValueError(f"reweight position {pos} outside sequence")
        else:
            matches = [i for i, w in enumerate(target_words) if w == key.lower()]
            if not matches:
                raise ValueError(f"reweight token {key!r} does not occur in the prompt")
            span = target_cond.token_spans.get(matches[0], ())
            pos = span[0]
        reweight_positions[pos] = float(factor)

    plan = EditPlan(
        spec=spec,
        source_prompt=source_prompt,
        target_prompt=target_prompt,
        source_nouns=source_nouns,
        target_nouns=target_nouns,
        num_steps=num_steps,
        alignment=tuple(pairs),
        reweight_positions=reweight_positions,
    )
    return plan, target_cond


def inject_cross_attention(
    source_map: CrossAttentionMap,
    target_map: CrossAttentionMap,
    plan: EditPlan,
    t: int,
) -> CrossAttentionMap:
    """Apply the edit's column operations for one timestep."""
    values = _inject_cross_values(source_map.values, target_map.values, plan, t)
    normalized = target_map.normalized and not plan.reweight_positions
    return CrossAttentionMap(values=values, timestep=t, normalized=normalized)


def _inject_cross_values(source: torch.Tensor, target: torch.Tensor,
                         plan: EditPlan, t: int) -> torch.Tensor:
    if not plan.in_cross_window(t):
        return target
    out = target
    if plan.spec.mode in ("word_swap", "refinement") and plan.alignment:
        out = out.clone()
        for src_pos, tgt_pos in plan.alignment:
            out[..., tgt_pos] = source[..., src_pos]
    if plan.reweight_positions:
        out = out.clone() if out is target else out
        for pos, factor in plan.reweight_positions.items():
            out[..., pos] = out[..., pos] * factor
        if plan.spec.renormalize_after_reweight:
            out = out / out.sum(dim=-1, keepdim=True)
    return out


def make_injection_controller(source_records: Mapping[str, AttentionRecord],
                              plan: EditPlan, t: int):
    """Controller for the target pass: swaps in source attention per layer."""

    def controller(probs: torch.Tensor, record: AttentionRecord) -> torch.Tensor:
        source = source_records.get(record.layer_id)
        if source is None:
            return probs
        if record.kind == "self":
            if plan.in_self_window(t):
                return source.probs
            return probs
        return _inject_cross_values(source.probs, probs, plan, t)

    return controller


@dataclass
class EditResult:
    plan: EditPlan
    edited_image: np.ndarray
    reconstruction_image: np.ndarray
    edited_latents: list[LatentCode]
    reconstruction_latents: list[LatentCode]
    # Aggregated per-step cross maps at the canonical resolution.
    source_maps_by_t: dict[int, np.ndarray] = field(default_factory=dict)
    target_maps_by_t: dict[int, np.ndarray] = field(default_factory=dict)


def edit_image(
    run: LoadedRun | PipelineResult,
    spec: EditSpec,
    backend: Backend,
    config: Optional[RunConfig] = None,
) -> EditResult:
    """Run the lockstep source/target passes and decode both endpoints."""
    config = config or RunConfig()
    T = backend.schedule.num_steps
    run_steps = run.num_steps if isinstance(run, LoadedRun) else run.trajectory.num_steps
    if run_steps != T:
        raise ValueError(f"run has {run_steps} steps but backend expects {T}")
    prompt = run.prompt
    nouns = tuple(run.noun_words)
    guidance = config.guidance_scale

    def token_set(t: int) -> DynamicTokenSet:
        if isinstance(run, LoadedRun):
            return run.token_set(t)
        return run.token_sets[t]

    def null_embedding(t: int) -> torch.Tensor:
        if isinstance(run, LoadedRun):
            return run.null_embedding(t)
        return run.null_schedule.embeddings[t - 1]

    source_cond_probe = backend.encode_prompt(prompt, noun_words=nouns)
    plan, _ = compile_edit(
        spec, prompt, nouns, T, source_cond_probe,
        target_cond_builder=lambda p, n: backend.encode_prompt(p, noun_words=n),
    )

    # Learned embeddings carry over to target nouns that were not swapped.
    unchanged = [k for k, (s, tgt) in enumerate(zip(plan.source_nouns, plan.target_nouns))
                 if s == tgt]

    z_src = run.z_final() if isinstance(run, LoadedRun) else run.trajectory[T]
    z_tgt = z_src
    src_latents = [z_src]
    tgt_latents = [z_tgt]
    source_maps: dict[int, np.ndarray] = {}
    target_maps: dict[int, np.ndarray] = {}

    with torch.no_grad():
        for t in range(T, 0, -1):
            tokens_t = token_set(t)
            null_t = TextEmbeddingSequence(embeddings=null_embedding(t))
            src_positions = tokens_t.positions

            cond_src = backend.encode_prompt(prompt, noun_words=nouns,
                                             overrides=tokens_t.tokens)
            tgt_overrides = {src_positions[k]: tokens_t.tokens[src_positions[k]]
                             for k in unchanged}
            cond_tgt = backend.encode_prompt(plan.target_prompt,
                                             noun_words=plan.target_nouns,
                                             overrides=tgt_overrides)

            record_self = plan.in_self_window(t)
            kinds = ("cross", "self") if record_self else ("cross",)
            out_src = backend.predict_noise(z_src, t, cond_src, record_attention=True,
                                            record_kinds=kinds)
            source_records = {r.layer_id: r for r in out_src.recorded_attention}
            controller = make_injection_controller(source_records, plan, t)
            out_tgt = backend.predict_noise(z_tgt, t, cond_tgt, record_attention=True,
                                            record_kinds=kinds, controller=controller)

            cross_src = aggregate(out_src.recorded_attention, config.cross_resolution, "cross")
            cross_tgt = aggregate(out_tgt.recorded_attention, config.cross_resolution, "cross")
            source_maps[t] = cross_src.values.numpy()
            target_maps[t] = cross_tgt.values.numpy()

            if guidance == 1.0:
                eps_src, eps_tgt = out_src.noise_prediction, out_tgt.noise_prediction
            else:
                eps_null_src = backend.predict_noise(z_src, t, null_t).noise_prediction
                eps_null_tgt = backend.predict_noise(z_tgt, t, null_t).noise_prediction
                eps_src = guidance * out_src.noise_prediction + (1 - guidance) * eps_null_src
                eps_tgt = guidance * out_tgt.noise_prediction + (1 - guidance) * eps_null_tgt

            z_src = ddim_sample_step(backend, z_src, t, eps_src)
            z_tgt = ddim_sample_step(backend, z_tgt, t, eps_tgt)
            src_latents.append(z_src)
            tgt_latents.append(z_tgt)

    return EditResult(
        plan=plan,
        edited_image=np.asarray(backend.decode_latent(z_tgt)),
        reconstruction_image=np.asarray(backend.decode_latent(z_src)),
        edited_latents=tgt_latents,
        reconstruction_latents=src_latents,
        source_maps_by_t=source_maps,
        target_maps_by_t=target_maps,
    )
