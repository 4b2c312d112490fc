"""Image-grid, overlay, and GIF export helpers for the CLI."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def to_uint8(img: np.ndarray) -> np.ndarray:
    """(C, H, W) float in [-1, 1] -> (H, W, 3) uint8."""
    arr = np.clip((img + 1.0) * 127.5, 0, 255).astype(np.uint8)
    arr = np.transpose(arr, (1, 2, 0))
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    return arr


def mask_overlay(img: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Blend a [0, 1] mask as a red tint over an image tile."""
    base = to_uint8(img).astype(np.float64)
    tint = np.zeros_like(base)
    tint[..., 0] = 255.0
    alpha = 0.5 * np.clip(mask, 0.0, 1.0)[..., None]
    return np.clip(base * (1 - alpha) + tint * alpha, 0, 255).astype(np.uint8)


def tile_grid(rows: list[list[np.ndarray]], pad: int = 2) -> np.ndarray:
    """Assemble uint8 (H, W, 3) tiles into one padded grid image."""
    h, w, _ = rows[0][0].shape
    n_rows = len(rows)
    n_cols = max(len(r) for r in rows)
    out = np.full(
        (n_rows * (h + pad) + pad, n_cols * (w + pad) + pad, 3), 255, dtype=np.uint8
    )
    for r, row in enumerate(rows):
        for c, tile in enumerate(row):
            y = pad + r * (h + pad)
            x = pad + c * (w + pad)
            out[y : y + h, x : x + w] = tile
    return out


def save_png(path: str | Path, grid: np.ndarray) -> None:
    Image.fromarray(grid).save(str(path), format="PNG")


def save_gif(path: str | Path, frames: list[np.ndarray], duration_ms: int = 120) -> None:
    imgs = [Image.fromarray(f) for f in frames]
    imgs[0].save(
        str(path),
        format="GIF",
        save_all=True,
        append_images=imgs[1:],
        duration=duration_ms,
        loop=0,
    )
