"""Raster helpers: resampling with pixel-centre alignment and YCbCr conversion."""

from __future__ import annotations

import numpy as np
from scipy import ndimage


def _src_coords(n_out: int, n_in: int) -> np.ndarray:
    return (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample of an H×W or H×W×C array; returns float64.

    Sample positions use pixel-centre alignment, so resizing to the same
    size reproduces the input exactly.
    """
    a = np.asarray(img, dtype=np.float64)
    H, W = a.shape[:2]
    if (H, W) == (out_h, out_w):
        return a.copy()
    rr, cc = np.meshgrid(_src_coords(out_h, H), _src_coords(out_w, W), indexing="ij")
    if a.ndim == 2:
        return ndimage.map_coordinates(a, [rr, cc], order=1, mode="nearest")
    return np.stack(
        [ndimage.map_coordinates(a[..., c], [rr, cc], order=1, mode="nearest") for c in range(a.shape[2])],
        axis=-1,
    )


def resize_nearest(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    a = np.asarray(img)
    H, W = a.shape[:2]
    ri = np.minimum((np.arange(out_h) + 0.5) * H / out_h, H - 1).astype(int)
    ci = np.minimum((np.arange(out_w) + 0.5) * W / out_w, W - 1).astype(int)
    return a[ri][:, ci]


def to_uint8(a: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(a), 0, 255).astype(np.uint8)


# full-range BT.601, as used by JPEG
_RGB2YCC = np.array([
    [0.299, 0.587, 0.114],
    [-0.168736, -0.331264, 0.5],
    [0.5, -0.418688, -0.081312],
])
_YCC2RGB = np.linalg.inv(_RGB2YCC)


def rgb_to_ycbcr(rgb: np.ndarray) -> np.ndarray:
    """H×W×3 RGB (any range) to Y, Cb, Cr with chroma centred on 0."""
    return np.asarray(rgb, dtype=np.float64) @ _RGB2YCC.T


def ycbcr_to_rgb(ycc: np.ndarray) -> np.ndarray:
    return np.asarray(ycc, dtype=np.float64) @ _YCC2RGB.T
