"""Prompt-based image editing with leakage-repaired cross attention.

Per-timestep learnable noun embeddings are optimized inside the sampling
loop so each noun's cross-attention map localizes only its object; the
cleaned-up maps then drive prompt-to-prompt editing (word swap, prompt
refinement, attention re-weighting) of real images via DDIM inversion
and null-text optimization.
"""

from .backends import LatentCode, NoiseSchedule, SyntheticBackend, TextEmbeddingSequence
from .config import RunConfig, load_config
from .edit import EditSpec, edit_image
from .inversion import LatentTrajectory, ddim_invert, ddim_sample
from .metrics import clip_score, iou_curve, structure_dist
from .nulltext import NullTextSchedule, nti_full, nti_step
from .pipeline import PipelineResult, load_run, run_pipeline, save_run
from .tokenopt import DynamicTokenSet, optimize_tokens_at_t

__version__ = "0.1.0"

__all__ = [
    "DynamicTokenSet",
    "EditSpec",
    "LatentCode",
    "LatentTrajectory",
    "NoiseSchedule",
    "NullTextSchedule",
    "PipelineResult",
    "RunConfig",
    "SyntheticBackend",
    "TextEmbeddingSequence",
    "clip_score",
    "ddim_invert",
    "ddim_sample",
    "edit_image",
    "iou_curve",
    "load_config",
    "load_run",
    "nti_full",
    "nti_step",
    "optimize_tokens_at_t",
    "run_pipeline",
    "save_run",
    "structure_dist",
]
