"""Background estimation from self-attention clusters and cross-attention agreement.

The self-attention rows are embedded with PCA, clustered with seeded
k-means, and each cluster is scored against every noun's cross-attention
map (mean attention inside the cluster). Clusters that score below the
threshold for all nouns are labeled background. Only the background is
extracted; per-object masks from this matching are unreliable by design.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from sklearn.cluster import KMeans

from .attention import SelfAttentionMap, TokenAttention
from .errors import DegenerateInputError


@dataclass(frozen=True)
class ClusterLabeling:
    """Per-pixel cluster ids on the self-attention grid."""

    labels: np.ndarray  # (resolution, resolution) ints in [0, num_clusters)
    num_clusters: int

    def __post_init__(self):
        if self.labels.min() < 0 or self.labels.max() >= self.num_clusters:
            raise ValueError("cluster labels out of range")

    def mask(self, v: int) -> np.ndarray:
        return (self.labels == v).astype(np.float64)

    @property
    def resolution(self) -> int:
        return self.labels.shape[0]


@dataclass(frozen=True)
class BackgroundMask:
    mask: np.ndarray  # binary (resolution, resolution)
    resolution: int

    def __post_init__(self):
        vals = np.unique(self.mask)
        if not np.all(np.isin(vals, (0.0, 1.0))):
            raise ValueError("mask must be binary")

    def popcount(self) -> int:
        return int(self.mask.sum())

    def to_tensor(self) -> torch.Tensor:
        return torch.as_tensor(self.mask, dtype=torch.float64)


def _canonical_labels(raw: np.ndarray, num_clusters: int) -> np.ndarray:
    """Relabel clusters by first appearance in scan order for stability."""
    mapping: dict[int, int] = {}
    out = np.empty_like(raw)
    for i, lab in enumerate(raw):
        if lab not in mapping:
            mapping[lab] = len(mapping)
        out[i] = mapping[lab]
    if len(mapping) != num_clusters:
        raise RuntimeError("k-means produced an empty cluster")
    return out


def cluster_self_attention(self_map: SelfAttentionMap, num_clusters: int = 5,
                           seed: int = 0) -> ClusterLabeling:
    """PCA over the attention rows, then seeded k-means into `num_clusters` groups."""
    if num_clusters < 2:
        raise ValueError("need at least two clusters")
    rows = self_map.values.detach().to(torch.float64).numpy()
    res = self_map.resolution

    centered = rows - rows.mean(axis=0, keepdims=True)
    if float(np.abs(centered).max()) < 1e-12:
        warnings.warn("self-attention rows are identical; returning one cluster",
                      RuntimeWarning)
        return ClusterLabeling(labels=np.zeros((res, res), dtype=np.int64), num_clusters=1)

    # Top principal components via the (dims x dims) gram eigendecomposition.
    gram = centered.T @ centered
    eigvals, eigvecs = np.linalg.eigh(gram)
    components = eigvecs[:, ::-1][:, :num_clusters]
    scores = centered @ components

    distinct = np.unique(scores.round(decimals=10), axis=0).shape[0]
    if distinct < num_clusters:
        warnings.warn(
            f"only {distinct} distinct self-attention rows; reducing cluster "
            f"count from {num_clusters}", RuntimeWarning)
        num_clusters = distinct

    km = KMeans(n_clusters=num_clusters, n_init=10, random_state=seed)
    raw = km.fit_predict(scores)
    labels = _canonical_labels(raw, num_clusters).reshape(res, res)
    return ClusterLabeling(labels=labels, num_clusters=num_clusters)


def upsample_nearest(map2d: np.ndarray, target: int) -> np.ndarray:
    src = map2d.shape[0]
    if target % src != 0:
        raise ValueError(f"cannot upsample {src} -> {target} by integer factor")
    factor = target // src
    return np.repeat(np.repeat(map2d, factor, axis=0), factor, axis=1)


def downsample_area(map2d: np.ndarray, target: int) -> np.ndarray:
    src = map2d.shape[0]
    if src % target != 0:
        raise ValueError(f"cannot downsample {src} -> {target} by integer factor")
    factor = src // target
    return map2d.reshape(target, factor, target, factor).mean(axis=(1, 3))


def agreement_score(token_attention: TokenAttention, cluster_mask: np.ndarray) -> float:
    """Mean attention of one noun inside a cluster: sum(A * M) / sum(M)."""
    mask = np.asarray(cluster_mask, dtype=np.float64)
    denom = mask.sum()
    if denom == 0:
        raise DegenerateInputError("cluster mask is empty")
    attn = token_attention.map.detach().to(torch.float64).numpy()
    if attn.shape != mask.shape:
        if mask.shape[0] % attn.shape[0] == 0:
            attn = upsample_nearest(attn, mask.shape[0])
        else:
            raise ValueError("attention and cluster shapes are incompatible")
    return float((attn * mask).sum() / denom)


def agreement_table(clusters: ClusterLabeling,
                    token_maps: Sequence[TokenAttention]) -> np.ndarray:
    """Scores for every (noun, cluster) pair; shape (K, num_clusters)."""
    table = np.zeros((len(token_maps), clusters.num_clusters))
    for n, tok in enumerate(token_maps):
        for v in range(clusters.num_clusters):
            table[n, v] = agreement_score(tok, clusters.mask(v))
    return table


def estimate_background(clusters: ClusterLabeling,
                        token_maps: Sequence[TokenAttention],
                        threshold: float = 0.2) -> BackgroundMask:
    """Union of clusters whose agreement score is below threshold for every noun."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    if not token_maps:
        raise ValueError("at least one token map required")
    table = agreement_table(clusters, token_maps)
    background_clusters = [v for v in range(clusters.num_clusters)
                           if bool((table[:, v] < threshold).all())]
    if len(background_clusters) == clusters.num_clusters:
        warnings.warn("every cluster scored as background; check prompt and nouns",
                      RuntimeWarning)
    mask = np.zeros_like(clusters.labels, dtype=np.float64)
    for v in background_clusters:
        mask[clusters.labels == v] = 1.0
    return BackgroundMask(mask=mask, resolution=clusters.resolution)


def background_at_resolution(mask: BackgroundMask, target: int) -> BackgroundMask:
    """Resample a background mask, re-binarizing at 0.5 after area averaging."""
    if target == mask.resolution:
        return mask
    if target < mask.resolution:
        avg = downsample_area(mask.mask, target)
        binary = (avg >= 0.5).astype(np.float64)
    else:
        binary = upsample_nearest(mask.mask, target)
    return BackgroundMask(mask=binary, resolution=target)
