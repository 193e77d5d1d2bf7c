"""Lossless raster exports: per-token heatmaps, attention grids, mask overlays."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .metrics import minmax_normalize

CELL_SIZE = 64
CELL_PAD = 2


def _to_gray(map2d: np.ndarray) -> Image.Image:
    arr = (minmax_normalize(map2d) * 255.0).round().astype(np.uint8)
    return Image.fromarray(arr, mode="L")


def save_token_heatmap(map2d: np.ndarray, path: str | Path, upscale: int = 16) -> None:
    """One token's attention as a grayscale PNG, nearest-neighbor upscaled."""
    img = _to_gray(np.asarray(map2d))
    img = img.resize((img.width * upscale, img.height * upscale), Image.NEAREST)
    img.save(path, format="PNG")


def attention_grid(maps: Sequence[Sequence[np.ndarray]]) -> Image.Image:
    """Rows of maps (e.g. nouns) by columns (e.g. timesteps) in one image."""
    if not maps or not maps[0]:
        raise ValueError("grid needs at least one row and one column")
    rows, cols = len(maps), len(maps[0])
    if any(len(r) != cols for r in maps):
        raise ValueError("all grid rows must have the same length")
    width = cols * CELL_SIZE + (cols + 1) * CELL_PAD
    height = rows * CELL_SIZE + (rows + 1) * CELL_PAD
    canvas = Image.new("L", (width, height), color=32)
    for i, row in enumerate(maps):
        for j, map2d in enumerate(row):
            cell = _to_gray(np.asarray(map2d)).resize((CELL_SIZE, CELL_SIZE), Image.NEAREST)
            x = CELL_PAD + j * (CELL_SIZE + CELL_PAD)
            y = CELL_PAD + i * (CELL_SIZE + CELL_PAD)
            canvas.paste(cell, (x, y))
    return canvas


def grid_dimensions(num_rows: int, num_cols: int) -> tuple[int, int]:
    """(width, height) in pixels of an attention grid with those counts."""
    return (
        num_cols * CELL_SIZE + (num_cols + 1) * CELL_PAD,
        num_rows * CELL_SIZE + (num_rows + 1) * CELL_PAD,
    )


def save_attention_grid(maps: Sequence[Sequence[np.ndarray]], path: str | Path) -> None:
    attention_grid(maps).save(path, format="PNG")


def save_mask(mask: np.ndarray, path: str | Path) -> None:
    """Binary mask as a 1-bit PNG."""
    img = Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L")
    img.convert("1").save(path, format="PNG")


def mask_overlay(base: np.ndarray, mask: np.ndarray) -> Image.Image:
    """Grayscale base with masked pixels tinted red; shapes must match."""
    base = np.asarray(base, dtype=np.float64)
    mask = np.asarray(mask) > 0
    if base.shape != mask.shape:
        raise ValueError("base and mask shapes differ")
    gray = (minmax_normalize(base) * 255.0).round().astype(np.uint8)
    rgb = np.stack([gray, gray, gray], axis=-1)
    rgb[mask, 0] = 255
    rgb[mask, 1] = rgb[mask, 1] // 3
    rgb[mask, 2] = rgb[mask, 2] // 3
    return Image.fromarray(rgb, mode="RGB")


def save_mask_overlay(base: np.ndarray, mask: np.ndarray, path: str | Path) -> None:
    mask_overlay(base, mask).save(path, format="PNG")


def overlay_tinted_count(image: Image.Image) -> int:
    """Number of tinted (non-gray) pixels in an overlay; equals the mask popcount."""
    arr = np.asarray(image)
    return int(((arr[..., 0] != arr[..., 1]) | (arr[..., 1] != arr[..., 2])).sum())


def save_sigma_table(sigma: np.ndarray, noun_words: Sequence[str], path: str | Path) -> None:
    """JSON sidecar with the per-noun, per-cluster agreement scores."""
    payload = {
        "nouns": list(noun_words),
        "scores": {word: [float(s) for s in row]
                   for word, row in zip(noun_words, np.asarray(sigma))},
    }
    Path(path).write_text(json.dumps(payload, indent=2))


def latent_preview(latent: np.ndarray) -> Image.Image:
    """First three channels of a latent-space array as a small RGB preview."""
    arr = np.asarray(latent, dtype=np.float64)
    if arr.ndim != 3:
        raise ValueError("latent preview expects (channels, height, width)")
    chans = [minmax_normalize(arr[min(c, arr.shape[0] - 1)]) for c in range(3)]
    rgb = (np.stack(chans, axis=-1) * 255.0).round().astype(np.uint8)
    return Image.fromarray(rgb, mode="RGB")
