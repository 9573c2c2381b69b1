"""PNG and kernel CSV reading/writing."""

import csv
import json
from pathlib import Path

import numpy as np
from PIL import Image

# BT.601 luma weights; also used by the YUV colour path.
LUMA = np.array([0.299, 0.587, 0.114])


def read_image(path):
    """Load an 8-bit PNG (or a ``.npy`` array) as floats in [0, 1].

    Grayscale images come back as ``(H, W)``, colour ones as ``(H, W, 3)``;
    alpha channels are dropped.
    """
    path = Path(path)
    if path.suffix == ".npy":
        return np.load(path)
    with Image.open(path) as im:
        if im.mode in ("L", "1", "I;16", "I"):
            arr = np.asarray(im.convert("L"), dtype=float)
        else:
            arr = np.asarray(im.convert("RGB"), dtype=float)
    return arr / 255.0


def to_uint8(x):
    return np.rint(np.clip(np.asarray(x, dtype=float), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(path, x):
    """Clip to [0, 1], round to the nearest 8-bit level and save as PNG."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(x)).save(path)


def to_luminance(rgb):
    rgb = np.asarray(rgb, dtype=float)
    return rgb if rgb.ndim == 2 else rgb[..., :3] @ LUMA


def read_kernel_csv(path):
    k = np.loadtxt(path, delimiter=",", ndmin=2)
    if k.shape[0] != k.shape[1] or k.shape[0] % 2 == 0:
        raise ValueError(f"{path}: kernel must be square with odd side, got {k.shape}")
    return k


def write_kernel_csv(path, kernel, side=None):
    k = np.asarray(kernel, dtype=float)
    if k.ndim == 1:
        side = side or int(round(np.sqrt(k.size)))
        k = k.reshape(side, side)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, k, delimiter=",", fmt="%.17g")


def write_csv(path, rows, fieldnames):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)


def write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
