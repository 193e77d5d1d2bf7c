"""Run configuration: defaults, JSON config files, CLI overrides, hashing.

Precedence is CLI flag > config file > built-in default. The resolved
config is embedded in the run manifest together with its hash, so a run
can always be traced back to the exact parameters that produced it.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

CHECKPOINT_ENV_VAR = "DYNEDIT_CHECKPOINT_DIR"


@dataclass
class LossWeights:
    """Weights for the three attention-repair losses."""

    balance: float = 1.0
    disjoint: float = 0.1
    background: float = 0.1

    def validate(self) -> None:
        vals = (self.balance, self.disjoint, self.background)
        if any(v < 0 for v in vals):
            raise ValueError("loss weights must be non-negative")
        if all(v == 0 for v in vals):
            raise ValueError("at least one loss weight must be positive")


@dataclass
class ThresholdSchedule:
    """Per-loss exponential threshold parameters: TH(t) = beta * exp(-t / alpha)."""

    beta_balance: float = 0.6
    alpha_balance: float = 25.0
    beta_disjoint: float = 0.2
    alpha_disjoint: float = 25.0
    beta_background: float = 0.2
    alpha_background: float = 25.0
    # When True the index fed into exp() is (T - t) instead of the raw
    # DDIM timestep t, flipping which end of the run has loose thresholds.
    reverse_index: bool = False

    def validate(self) -> None:
        for name in ("beta_balance", "alpha_balance", "beta_disjoint",
                     "alpha_disjoint", "beta_background", "alpha_background"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class TokenOptConfig:
    """Inner-loop settings for per-timestep token optimization."""

    max_iterations: int = 20
    learning_rate: float = 1e-2
    # Default: a fresh token set per timestep, warm-started from the
    # previous one. False shares a single set across all timesteps.
    per_timestep: bool = True


@dataclass
class NullTextConfig:
    """Inner-loop settings for null-embedding optimization."""

    inner_iterations: int = 10
    learning_rate: float = 1e-2
    # Linear decay of the learning rate across the outer steps, halving it
    # by the end of the run; improves endgame precision at small t.
    learning_rate_decay: bool = True
    early_stop_loss: float = 1e-6


@dataclass
class BackgroundConfig:
    """Self-attention clustering and background labeling."""

    num_clusters: int = 5
    agreement_threshold: float = 0.2
    cluster_seed: int = 0
    # None averages attention over every recorded timestep; otherwise a
    # (start, stop) pair of trajectory indices restricts the range.
    timestep_range: Optional[tuple[int, int]] = None


@dataclass
class EditConfig:
    cross_injection_fraction: float = 0.8
    self_injection_fraction: float = 0.4
    renormalize_after_reweight: bool = False


@dataclass
class EvalConfig:
    threshold_steps: int = 101


@dataclass
class SyntheticBackendConfig:
    """Dimensions and gains of the deterministic test backend."""

    seed: int = 0
    latent_channels: int = 4
    latent_size: int = 8
    embed_dim: int = 16
    sequence_length: int = 8
    num_heads: int = 4
    cross_resolutions: tuple[int, ...] = (8, 16, 32)
    self_resolution: int = 32
    # Noise-path gains. The z- and attention-readout gains are kept small so
    # the invert/sample round trip stays tight; the conditioning gain is the
    # lever that null-text and token optimization act on.
    noise_gain_latent: float = 1e-4
    noise_gain_time: float = 1e-3
    noise_gain_cond: float = 0.35
    noise_gain_attention: float = 1e-4
    noise_bias_scale: float = 0.05
    # Embedding table spread around a shared center; small spread keeps the
    # null embedding within reach of the 10-step inner optimizer.
    embed_spread: float = 0.3
    feature_position_scale: float = 0.15
    logit_gain: float = 4.0
    # Signal level sqrt(alpha_bar) decays linearly from 1.0 to this value.
    final_signal_level: float = 0.7


@dataclass
class RunConfig:
    """Everything a pipeline run needs, with built-in defaults."""

    backend: str = "synthetic"
    seed: int = 0
    num_steps: int = 50
    guidance_scale: float = 7.5
    inversion_guidance_scale: float = 1.0
    cross_resolution: int = 16
    self_resolution: int = 32
    gaussian_kernel_size: int = 3
    gaussian_sigma: float = 0.5
    weights: LossWeights = field(default_factory=LossWeights)
    thresholds: ThresholdSchedule = field(default_factory=ThresholdSchedule)
    token_opt: TokenOptConfig = field(default_factory=TokenOptConfig)
    null_text: NullTextConfig = field(default_factory=NullTextConfig)
    background: BackgroundConfig = field(default_factory=BackgroundConfig)
    edit: EditConfig = field(default_factory=EditConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    synthetic: SyntheticBackendConfig = field(default_factory=SyntheticBackendConfig)
    checkpoint_dir: Optional[str] = None
    # Real adapter only: which UNet attention layers feed the aggregated
    # maps. None selects every layer matching the canonical resolutions.
    attention_layers: Optional[list[str]] = None

    def validate(self) -> None:
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        self.weights.validate()
        self.thresholds.validate()
        if not 0.0 <= self.edit.cross_injection_fraction <= 1.0:
            raise ValueError("cross_injection_fraction must lie in [0, 1]")
        if not 0.0 <= self.edit.self_injection_fraction <= 1.0:
            raise ValueError("self_injection_fraction must lie in [0, 1]")

    def resolved_checkpoint_dir(self) -> Optional[str]:
        return self.checkpoint_dir or os.environ.get(CHECKPOINT_ENV_VAR)


def _to_plain(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    return obj


def _apply_overrides(cfg: Any, data: dict[str, Any], path: str = "") -> None:
    for key, value in data.items():
        if not hasattr(cfg, key):
            raise ValueError(f"unknown config key: {path}{key}")
        current = getattr(cfg, key)
        if dataclasses.is_dataclass(current) and isinstance(value, dict):
            _apply_overrides(current, value, path=f"{path}{key}.")
        else:
            if isinstance(current, tuple) and isinstance(value, list):
                value = tuple(value)
            setattr(cfg, key, value)


def load_config(path: Optional[str | Path] = None,
                overrides: Optional[dict[str, Any]] = None) -> RunConfig:
    """Build a RunConfig from defaults, an optional JSON file, and overrides."""
    cfg = RunConfig()
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise ValueError("config file must contain a JSON object")
        _apply_overrides(cfg, data)
    if overrides:
        _apply_overrides(cfg, overrides)
    cfg.validate()
    return cfg


def config_to_dict(cfg: RunConfig) -> dict[str, Any]:
    return _to_plain(cfg)


def config_hash(cfg: RunConfig) -> str:
    """Stable hash of the fully resolved configuration."""
    canonical = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
