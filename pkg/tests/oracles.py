"""Brute-force reference implementations, kept deliberately independent of
the package's own code paths: plain loops and explicit arithmetic only."""
from __future__ import annotations

import math

import numpy as np


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    num = sum(float(x) * float(y) for x, y in zip(a, b))
    na = math.sqrt(sum(float(x) ** 2 for x in a))
    nb = math.sqrt(sum(float(y) ** 2 for y in b))
    return num / (na * nb)


def disjoint_loss(maps) -> float:
    total = 0.0
    for i in range(len(maps)):
        for j in range(len(maps)):
            if i != j:
                total += cosine(maps[i], maps[j])
    return total


def background_loss(maps, mask) -> float:
    return sum(cosine(m, mask) for m in maps)


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2
    kernel = np.empty((size, size))
    for i in range(size):
        for j in range(size):
            kernel[i, j] = math.exp(-((i - half) ** 2 + (j - half) ** 2) / (2 * sigma**2))
    return kernel / kernel.sum()


def convolve_replicate(map2d: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Direct convolution with replicate (edge-clamp) padding."""
    h, w = map2d.shape
    k = kernel.shape[0]
    pad = k // 2
    out = np.empty_like(map2d, dtype=np.float64)
    for i in range(h):
        for j in range(w):
            acc = 0.0
            for di in range(k):
                for dj in range(k):
                    si = min(max(i + di - pad, 0), h - 1)
                    sj = min(max(j + dj - pad, 0), w - 1)
                    acc += map2d[si, sj] * kernel[di, dj]
            out[i, j] = acc
    return out


def balance_loss(maps, kernel_size: int = 3, sigma: float = 0.5) -> float:
    kernel = gaussian_kernel(kernel_size, sigma)
    worst = -np.inf
    for m in maps:
        smoothed = convolve_replicate(np.asarray(m, dtype=np.float64), kernel)
        worst = max(worst, 1.0 - smoothed.max())
    return worst


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    out = np.empty_like(logits, dtype=np.float64)
    for i in range(logits.shape[0]):
        row = logits[i]
        e = np.array([math.exp(float(v)) for v in row])
        out[i] = e / e.sum()
    return out


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    inter = 0
    union = 0
    for p, g in zip(pred.reshape(-1), gt.reshape(-1)):
        if p and g:
            inter += 1
        if p or g:
            union += 1
    return inter / union if union else 0.0


def self_similarity_distance(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    """Mean squared difference between cosine self-similarity matrices."""
    n = feats_a.shape[0]
    total = 0.0
    for i in range(n):
        for j in range(n):
            total += (cosine(feats_a[i], feats_a[j]) - cosine(feats_b[i], feats_b[j])) ** 2
    return total / (n * n)


def agreement(attn: np.ndarray, mask: np.ndarray) -> float:
    num = 0.0
    den = 0.0
    for a, m in zip(attn.reshape(-1), mask.reshape(-1)):
        num += a * m
        den += m
    return num / den
