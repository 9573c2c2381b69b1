"""Colour pipeline: restore luminance, median-filter chroma."""

import numpy as np
from scipy.ndimage import median_filter

# BT.601 analog YUV.
RGB_TO_YUV = np.array([
    [0.299, 0.587, 0.114],
    [-0.14713, -0.28886, 0.436],
    [0.615, -0.51499, -0.10001],
])
YUV_TO_RGB = np.linalg.inv(RGB_TO_YUV)


def rgb_to_yuv(rgb):
    return np.asarray(rgb, dtype=float) @ RGB_TO_YUV.T


def yuv_to_rgb(yuv):
    return np.asarray(yuv, dtype=float) @ YUV_TO_RGB.T


def restore_color(rgb, restore_luma, window=3):
    """Run ``restore_luma`` on Y, median-filter U and V, convert back, clip.

    ``restore_luma`` maps a 2D plane to ``(plane, extra)``; ``extra`` is
    passed through (e.g. the estimated kernel).
    """
    yuv = rgb_to_yuv(rgb)
    y, extra = restore_luma(yuv[..., 0])
    u = median_filter(yuv[..., 1], size=window, mode="wrap")
    v = median_filter(yuv[..., 2], size=window, mode="wrap")
    out = yuv_to_rgb(np.stack([y, u, v], axis=-1))
    return np.clip(out, 0.0, 1.0), extra
