"""Portable graymap (PGM) output for sample grids."""
from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError


def to_grid(images: np.ndarray, side: int, n_cols: int = 8, pad: int = 2) -> np.ndarray:
    """Tile flattened [N, side*side] images into one [H, W] grayscale canvas."""
    n = images.shape[0]
    if n == 0:
        return np.zeros((0, 0), dtype=np.uint8)
    if images.shape[1] != side * side:
        raise ConfigError(f"images are not {side}x{side}")
    n_cols = min(n_cols, n)
    n_rows = math.ceil(n / n_cols)
    canvas = np.zeros((n_rows * (side + pad) + pad, n_cols * (side + pad) + pad))
    for i in range(n):
        r, c = divmod(i, n_cols)
        top = pad + r * (side + pad)
        left = pad + c * (side + pad)
        canvas[top:top + side, left:left + side] = images[i].reshape(side, side)
    return np.clip(canvas * 255.0, 0, 255).astype(np.uint8)


def write_pgm(path, image: np.ndarray) -> None:
    """Binary PGM (P5), maxval 255."""
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape if image.size else (0, 0)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(image.tobytes())
