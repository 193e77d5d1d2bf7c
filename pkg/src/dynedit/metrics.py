"""Quantitative harness: IoU-vs-threshold curves and pluggable external metrics.

Attention maps are min-max normalized per map, binarized at each threshold
of a [0, 1] sweep, and compared against ground-truth masks. The CLIP-score
and structure-distance metrics only need narrow client interfaces (embed
text/image to a vector; featurize an image into patch vectors), so the
core suite runs without any external model.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence

import numpy as np

from .errors import DegenerateInputError


@dataclass(frozen=True)
class IoUCurve:
    thresholds: np.ndarray
    iou: np.ndarray
    auc: float

    def __post_init__(self):
        if len(self.thresholds) != len(self.iou):
            raise ValueError("thresholds and iou must have equal length")
        if not np.all(np.diff(self.thresholds) > 0):
            raise ValueError("thresholds must be strictly increasing")

    def at(self, threshold: float) -> float:
        idx = int(np.argmin(np.abs(self.thresholds - threshold)))
        return float(self.iou[idx])


@dataclass
class MetricReport:
    clip_score: Optional[float] = None
    structure_dist: Optional[float] = None
    per_image: list[dict] = field(default_factory=list)


def minmax_normalize(map2d: np.ndarray) -> np.ndarray:
    arr = np.asarray(map2d, dtype=np.float64)
    lo, hi = arr.min(), arr.max()
    if hi == lo:
        return np.zeros_like(arr)
    return (arr - lo) / (hi - lo)


def binary_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    inter = float(np.logical_and(pred, gt).sum())
    union = float(np.logical_or(pred, gt).sum())
    if union == 0:
        return 0.0
    return inter / union


def iou_curve(token_map: np.ndarray, gt_mask: np.ndarray, steps: int = 101) -> IoUCurve:
    """IoU of the thresholded (min-max normalized) map against the ground truth."""
    if steps < 2:
        raise ValueError("need at least two threshold steps")
    gt = np.asarray(gt_mask) > 0
    if gt.sum() == 0:
        raise DegenerateInputError("ground-truth mask is empty")
    if gt.shape != np.asarray(token_map).shape:
        raise ValueError("map and mask shapes differ")
    normalized = minmax_normalize(token_map)
    thresholds = np.linspace(0.0, 1.0, steps)
    ious = np.array([binary_iou(normalized >= th, gt) for th in thresholds])
    auc = float(np.trapezoid(ious, thresholds))
    return IoUCurve(thresholds=thresholds, iou=ious, auc=auc)


class EmbeddingClient(Protocol):
    def embed_text(self, text: str) -> np.ndarray: ...

    def embed_image(self, image) -> np.ndarray: ...


def clip_score(images: Sequence, texts: Sequence[str],
               embedder: Optional[EmbeddingClient]) -> Optional[float]:
    """Mean image-text cosine similarity as a percentage, clipped at zero.

    Returns None when no embedding client is available; the metric is
    marked absent rather than failing the pipeline.
    """
    if embedder is None:
        return None
    if len(images) != len(texts) or not images:
        raise ValueError("need equally many images and texts")
    sims = []
    for image, text in zip(images, texts):
        ei = np.asarray(embedder.embed_image(image), dtype=np.float64)
        et = np.asarray(embedder.embed_text(text), dtype=np.float64)
        ei = ei / np.linalg.norm(ei)
        et = et / np.linalg.norm(et)
        sims.append(max(float(ei @ et), 0.0))
    return 100.0 * float(np.mean(sims))


class PatchFeatureClient(Protocol):
    def __call__(self, image) -> np.ndarray: ...


def self_similarity(features: np.ndarray) -> np.ndarray:
    """Cosine similarity matrix between patch feature rows."""
    feats = np.asarray(features, dtype=np.float64)
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise DegenerateInputError("zero-norm patch feature")
    unit = feats / norms
    return unit @ unit.T


def structure_dist(image_a, image_b,
                   featurizer: Optional[PatchFeatureClient]) -> Optional[float]:
    """Mean squared difference between the two patch self-similarity matrices."""
    if featurizer is None:
        return None
    sim_a = self_similarity(featurizer(image_a))
    sim_b = self_similarity(featurizer(image_b))
    if sim_a.shape != sim_b.shape:
        raise ValueError("images produced different patch counts")
    return float(np.mean((sim_a - sim_b) ** 2))
