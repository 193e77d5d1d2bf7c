"""End-to-end inversion with per-timestep token and null-text optimization.

The flow: invert the image at guidance 1 while recording attention,
estimate the background mask from self-attention clusters, then walk the
trajectory back down at the editing guidance scale. At every step the
noun embeddings are optimized under the leakage losses first, then the
null embedding is tuned so the guided step tracks the stored trajectory.
Both optimizations warm-start from the previous step's result.
"""
from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import archive as archive_io
from .attention import CrossAttentionMap, TokenAttention, token_map
from .backends.base import Backend, LatentCode
from .bgmask import (
    BackgroundMask,
    ClusterLabeling,
    agreement_table,
    background_at_resolution,
    cluster_self_attention,
    estimate_background,
)
from .config import RunConfig, config_hash, config_to_dict
from .inversion import InversionResult, LatentTrajectory, ddim_invert
from .nulltext import NullTextSchedule, nti_step
from .tokenopt import DynamicTokenSet, initial_token_set, noun_attention_maps, optimize_tokens_at_t

MANIFEST_SUFFIX = ".manifest.json"


@dataclass
class PipelineResult:
    prompt: str
    noun_words: tuple[str, ...]
    noun_positions: tuple[int, ...]
    trajectory: LatentTrajectory
    token_sets: dict[int, DynamicTokenSet]
    null_schedule: NullTextSchedule
    background32: BackgroundMask
    background16: BackgroundMask
    clusters: ClusterLabeling
    sigma_table: np.ndarray
    # Noun attention averaged over all timesteps, before and after token
    # optimization, at the canonical cross resolution.
    pre_noun_maps: list[np.ndarray]
    post_noun_maps: list[np.ndarray]
    # Per-timestep post-optimization noun maps (t -> K x res x res).
    post_maps_by_t: dict[int, np.ndarray] = field(default_factory=dict)
    token_opt_log: dict[int, dict] = field(default_factory=dict)
    null_text_log: dict[int, dict] = field(default_factory=dict)
    image: Optional[np.ndarray] = None
    # Guided backward trace z_bar, indexed 0..T (entry T equals the
    # inversion endpoint); entry 0 is the reconstruction latent.
    backward_trace: list[LatentCode] = field(default_factory=list)

    @property
    def reconstruction(self) -> LatentCode:
        return self.backward_trace[0]


def _mean_noun_maps(cross_maps: Sequence[CrossAttentionMap],
                    positions: Sequence[int],
                    timestep_range: Optional[tuple[int, int]] = None) -> list[np.ndarray]:
    maps = cross_maps
    if timestep_range is not None:
        lo, hi = timestep_range
        maps = [m for m in cross_maps if lo <= m.timestep <= hi]
        if not maps:
            raise ValueError("timestep range selects no recorded attention")
    mean_values = torch.stack([m.values for m in maps]).mean(dim=0)
    mean_map = CrossAttentionMap(values=mean_values, timestep=-1)
    return [token_map(mean_map, p).map.numpy() for p in positions]


def estimate_background_from_inversion(
    inversion: InversionResult,
    noun_positions: Sequence[int],
    config: RunConfig,
) -> tuple[BackgroundMask, BackgroundMask, ClusterLabeling, np.ndarray, list[np.ndarray]]:
    """Cluster the averaged self attention and score nouns against each cluster."""
    pre_maps = _mean_noun_maps(inversion.cross_maps, noun_positions,
                               config.background.timestep_range)
    clusters = cluster_self_attention(
        inversion.self_attention_mean,
        num_clusters=config.background.num_clusters,
        seed=config.background.cluster_seed,
    )
    token_maps = [
        TokenAttention(map=torch.as_tensor(m, dtype=torch.float64), token_position=p)
        for m, p in zip(pre_maps, noun_positions)
    ]
    sigma = agreement_table(clusters, token_maps)
    bg32 = estimate_background(clusters, token_maps, threshold=config.background.agreement_threshold)
    bg16 = background_at_resolution(bg32, config.cross_resolution)
    return bg32, bg16, clusters, sigma, pre_maps


def run_pipeline(
    backend: Backend,
    image,
    prompt: str,
    noun_words: Sequence[str],
    config: Optional[RunConfig] = None,
) -> PipelineResult:
    """Invert an image and learn per-timestep noun and null embeddings."""
    config = config or RunConfig()
    config.validate()
    T = backend.schedule.num_steps
    noun_words = tuple(noun_words)
    if not noun_words:
        raise ValueError("at least one noun word is required")

    cond_stock = backend.encode_prompt(prompt, noun_words=noun_words)
    positions = cond_stock.noun_positions

    inversion = ddim_invert(
        backend, image, cond_stock,
        record_attention=True,
        cross_resolution=config.cross_resolution,
        self_resolution=config.self_resolution,
    )
    trajectory = inversion.trajectory

    bg32, bg16, clusters, sigma, pre_maps = estimate_background_from_inversion(
        inversion, positions, config)
    bg16_tensor: Optional[torch.Tensor] = bg16.to_tensor()
    if bg16.popcount() == 0:
        warnings.warn("estimated background is empty; background loss disabled",
                      RuntimeWarning)
        bg16_tensor = None

    tokens = initial_token_set(backend, prompt, noun_words, timestep=T)
    null = backend.encode_null().embeddings
    z_bar = trajectory[T]
    trace: list[Optional[LatentCode]] = [None] * (T + 1)
    trace[T] = z_bar

    token_sets: dict[int, DynamicTokenSet] = {}
    token_log: dict[int, dict] = {}
    null_log: dict[int, dict] = {}
    null_embeddings: list[Optional[torch.Tensor]] = [None] * T
    null_losses = [0.0] * T
    post_sum: Optional[torch.Tensor] = None
    post_by_t: dict[int, np.ndarray] = {}

    skip_token_opt = bg16_tensor is None and len(noun_words) == 1
    if skip_token_opt:
        warnings.warn("single noun with no background mask: token optimization skipped",
                      RuntimeWarning)

    for t in range(T, 0, -1):
        # The static ablation optimizes one shared token set at the first
        # step only; the default re-optimizes at every timestep.
        optimize_now = not skip_token_opt and (config.token_opt.per_timestep or t == T)
        if optimize_now:
            opt = optimize_tokens_at_t(
                backend, z_bar, t, prompt, noun_words, tokens,
                background=bg16_tensor,
                weights=config.weights,
                thresholds=config.thresholds,
                config=config.token_opt,
                resolution=config.cross_resolution,
                gaussian_sigma=config.gaussian_sigma,
                gaussian_size=config.gaussian_kernel_size,
            )
            tokens = opt.tokens
            token_log[t] = {
                "iterations": opt.iterations,
                "converged": opt.converged,
                "cap_hit": opt.cap_hit,
                "losses": opt.final_losses,
            }
        token_sets[t] = tokens.detached(timestep=t)

        with torch.no_grad():
            maps_t = noun_attention_maps(backend, z_bar, t, prompt, noun_words, tokens,
                                         resolution=config.cross_resolution)
        stacked = torch.stack([m.map for m in maps_t])
        post_by_t[t] = stacked.numpy()
        post_sum = stacked if post_sum is None else post_sum + stacked

        cond_t = backend.encode_prompt(prompt, noun_words=noun_words, overrides=tokens.tokens)
        step = nti_step(
            backend, z_bar, trajectory[t - 1], t, cond_t, null,
            guidance_scale=config.guidance_scale,
            config=config.null_text,
        )
        null = step.null_embedding
        null_embeddings[t - 1] = null
        null_losses[t - 1] = step.final_loss
        null_log[t] = {
            "initial_loss": step.initial_loss,
            "final_loss": step.final_loss,
            "iterations": step.iterations,
        }
        z_bar = step.z_prev
        trace[t - 1] = z_bar
        # Warm starts: the next (lower) timestep begins from this step's
        # tokens and null embedding.

    post_maps = [(post_sum[k] / T).numpy() for k in range(len(noun_words))]
    return PipelineResult(
        prompt=prompt,
        noun_words=noun_words,
        noun_positions=positions,
        trajectory=trajectory,
        token_sets=token_sets,
        null_schedule=NullTextSchedule(embeddings=null_embeddings, per_step_loss=null_losses),
        background32=bg32,
        background16=bg16,
        clusters=clusters,
        sigma_table=sigma,
        pre_noun_maps=pre_maps,
        post_noun_maps=post_maps,
        post_maps_by_t=post_by_t,
        token_opt_log=token_log,
        null_text_log=null_log,
        image=np.asarray(image, dtype=np.float64),
        backward_trace=trace,
    )


# ----------------------------------------------------------------------
# persistence

def _archive_entries(result: PipelineResult) -> dict[str, np.ndarray]:
    T = result.trajectory.num_steps
    entries: dict[str, np.ndarray] = {"image": result.image}
    for t in range(T + 1):
        entries[f"trajectory/{t}"] = result.trajectory[t].data.numpy()
    for t in range(1, T + 1):
        entries[f"null/{t}"] = result.null_schedule.embeddings[t - 1].numpy()
        entries[f"tokens/{t}"] = result.token_sets[t].stacked().numpy()
    if result.backward_trace:
        entries["reconstruction"] = result.reconstruction.data.numpy()
    entries["background/mask32"] = result.background32.mask
    entries["background/mask16"] = result.background16.mask
    entries["clusters/labels32"] = result.clusters.labels.astype(np.float64)
    entries["sigma_table"] = result.sigma_table
    for k in range(len(result.noun_words)):
        entries[f"attention/pre/{k}"] = result.pre_noun_maps[k]
        entries[f"attention/post/{k}"] = result.post_noun_maps[k]
    for t, stacked in result.post_maps_by_t.items():
        entries[f"attention/post_t/{t}"] = stacked
    return entries


def _content_hash(manifest: dict, archive_path: Path) -> str:
    stable = {k: v for k, v in manifest.items() if k not in ("timings", "content_hash")}
    payload = json.dumps(stable, sort_keys=True, separators=(",", ":")).encode("utf-8")
    digest = hashlib.sha256(payload)
    digest.update(archive_path.read_bytes())
    return digest.hexdigest()


def save_run(
    result: PipelineResult,
    out_dir: str | Path,
    config: RunConfig,
    image_path: Optional[str] = None,
    timings: Optional[dict[str, float]] = None,
    stem: str = "run",
) -> tuple[Path, Path]:
    """Write the single-file archive and its JSON manifest; returns both paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    archive_path = out_dir / f"{stem}{archive_io.DEFAULT_SUFFIX}"
    manifest_path = out_dir / f"{stem}{MANIFEST_SUFFIX}"

    archive_io.write_archive(archive_path, _archive_entries(result))
    manifest = {
        "prompt": result.prompt,
        "noun_words": list(result.noun_words),
        "noun_positions": list(result.noun_positions),
        "num_steps": result.trajectory.num_steps,
        "image_path": image_path,
        "config": config_to_dict(config),
        "config_hash": config_hash(config),
        "token_opt": {str(t): log for t, log in sorted(result.token_opt_log.items())},
        "null_text": {str(t): log for t, log in sorted(result.null_text_log.items())},
        "outputs": {"archive": archive_path.name},
        "timings": timings or {},
    }
    manifest["content_hash"] = _content_hash(manifest, archive_path)
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return archive_path, manifest_path


@dataclass
class LoadedRun:
    prompt: str
    noun_words: tuple[str, ...]
    noun_positions: tuple[int, ...]
    num_steps: int
    arrays: dict[str, np.ndarray]
    manifest: dict

    def z_final(self) -> LatentCode:
        data = torch.as_tensor(self.arrays[f"trajectory/{self.num_steps}"], dtype=torch.float64)
        return LatentCode(data=data, timestep_index=self.num_steps)

    def null_embedding(self, t: int) -> torch.Tensor:
        return torch.as_tensor(self.arrays[f"null/{t}"], dtype=torch.float64)

    def token_set(self, t: int) -> DynamicTokenSet:
        stacked = torch.as_tensor(self.arrays[f"tokens/{t}"], dtype=torch.float64)
        tokens = {pos: stacked[k] for k, pos in enumerate(self.noun_positions)}
        return DynamicTokenSet(tokens=tokens, timestep=t)


def load_run(archive_path: str | Path) -> LoadedRun:
    """Load a persisted run (archive plus sibling manifest)."""
    archive_path = Path(archive_path)
    manifest_path = archive_path.with_name(
        archive_path.name.removesuffix(archive_io.DEFAULT_SUFFIX) + MANIFEST_SUFFIX)
    if not manifest_path.exists():
        raise FileNotFoundError(f"manifest not found next to archive: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    arrays = archive_io.read_archive(archive_path)
    required = {"image", f"trajectory/{manifest['num_steps']}"}
    missing = required - arrays.keys()
    if missing:
        raise ValueError(f"run archive incomplete; missing {sorted(missing)}")
    return LoadedRun(
        prompt=manifest["prompt"],
        noun_words=tuple(manifest["noun_words"]),
        noun_positions=tuple(manifest["noun_positions"]),
        num_steps=manifest["num_steps"],
        arrays=arrays,
        manifest=manifest,
    )
