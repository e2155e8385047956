"""Image pyramids with integer-exact smoothing.

Grayscale pyramids use a separable binomial kernel (1, 4, 6, 4, 1) with
replicated borders. The convolution runs in int32 and is rounded once with
(acc + 128) >> 8, so results are identical across platforms. Decimation keeps
the even-indexed pixels, which pairs with intrinsics halving in
CameraIntrinsics.halved().
"""

from __future__ import annotations

import numpy as np

from .geometry import CameraIntrinsics

_BINOMIAL = (1, 4, 6, 4, 1)


def binomial_decimate(img: np.ndarray) -> np.ndarray:
    """Smooth a uint8 image with the binomial kernel and keep even pixels."""
    if img.dtype != np.uint8:
        raise ValueError("binomial_decimate expects uint8 input")
    padded = np.pad(img.astype(np.int32), 2, mode="edge")
    h, w = img.shape
    rows = np.zeros((h + 4, w), dtype=np.int32)
    for i, kv in enumerate(_BINOMIAL):
        rows += kv * padded[:, i:i + w]
    acc = np.zeros((h, w), dtype=np.int32)
    for i, kv in enumerate(_BINOMIAL):
        acc += kv * rows[i:i + h, :]
    smoothed = ((acc + 128) >> 8).astype(np.uint8)
    return smoothed[::2, ::2]


def gaussian_pyramid(img: np.ndarray, levels: int) -> list[np.ndarray]:
    """Levels of a uint8 image, finest first; level i has i decimations."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    out = [img]
    for _ in range(levels - 1):
        out.append(binomial_decimate(out[-1]))
    return out


def decimate_nearest(arr: np.ndarray) -> np.ndarray:
    """Keep even-indexed pixels; used for depth and normal maps where
    averaging across discontinuities would invent geometry."""
    return arr[::2, ::2]


def nearest_pyramid(arr: np.ndarray, levels: int) -> list[np.ndarray]:
    out = [arr]
    for _ in range(levels - 1):
        out.append(decimate_nearest(out[-1]))
    return out


def upsample_nearest(arr: np.ndarray, out_shape: tuple[int, int]) -> np.ndarray:
    """Duplicate each pixel 2x2 and crop to out_shape (handles odd sizes)."""
    oh, ow = out_shape
    if oh > 2 * arr.shape[0] or ow > 2 * arr.shape[1]:
        raise ValueError("upsample_nearest only doubles resolution")
    rep = np.repeat(np.repeat(arr, 2, axis=0), 2, axis=1)
    return rep[:oh, :ow]


def intrinsics_pyramid(k: CameraIntrinsics, levels: int) -> list[CameraIntrinsics]:
    out = [k]
    for _ in range(levels - 1):
        out.append(out[-1].halved())
    return out
