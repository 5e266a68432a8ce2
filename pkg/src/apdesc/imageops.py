"""Small shared image helpers."""

from __future__ import annotations

import numpy as np


def bilinear_resize(image: np.ndarray, out_size: int) -> np.ndarray:
    """Resize a square image by bilinear interpolation.

    Output lattice points sit at linspace(0, n - 1, out) in source pixel
    coordinates (corner-aligned), matching the identity-warp sampling
    convention used by the transformer module.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] != img.shape[1]:
        raise ValueError("expected a square 2-d image")
    n = img.shape[0]
    if out_size == n:
        return img.copy()
    pos = np.linspace(0.0, n - 1.0, out_size)
    i0 = np.clip(np.floor(pos).astype(int), 0, n - 2)
    w = pos - i0
    rows = img[i0, :] * (1.0 - w)[:, None] + img[i0 + 1, :] * w[:, None]
    out = rows[:, i0] * (1.0 - w)[None, :] + rows[:, i0 + 1] * w[None, :]
    return out


def resize_batch(images: np.ndarray, out_size: int) -> np.ndarray:
    imgs = np.asarray(images, dtype=np.float64)
    return np.stack([bilinear_resize(im, out_size) for im in imgs])
