"""Kernel and image quality metrics, and manifest-level evaluation."""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

from .io import read_image, read_kernel_csv, to_luminance, write_csv, write_json

log = logging.getLogger(__name__)

PSNR_CAP = 99.0
SSIM_WIN = 11
SSIM_SIGMA = 1.5
METRICS = ("kernel_mse", "kernel_hinf", "kernel_mae", "psnr", "ssim")


def _pair(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size != b.size:
        raise ValueError(f"size mismatch: {a.shape} vs {b.shape}")
    return a, b


def kernel_mse(h_est, h_true):
    """Squared l2 norm of the difference (not divided by the tap count)."""
    a, b = _pair(h_est, h_true)
    return float(np.sum((a.ravel() - b.ravel()) ** 2))


def kernel_mae(h_est, h_true):
    """l1 norm of the difference."""
    a, b = _pair(h_est, h_true)
    return float(np.sum(np.abs(a.ravel() - b.ravel())))


def _as_square(h):
    h = np.asarray(h, dtype=float)
    if h.ndim == 1:
        s = int(round(np.sqrt(h.size)))
        if s * s != h.size:
            raise ValueError("kernel vector length is not a perfect square")
        h = h.reshape(s, s)
    return h


def kernel_hinf(h_est, h_true, pad_size=64):
    """Max modulus of the difference of the zero-padded 2D DFTs."""
    a, b = _as_square(h_est), _as_square(h_true)
    if a.shape != b.shape:
        raise ValueError(f"kernel shapes differ: {a.shape} vs {b.shape}")
    if pad_size < a.shape[0]:
        raise ValueError("pad_size smaller than the kernel")
    return float(np.max(np.abs(np.fft.fft2(a - b, s=(pad_size, pad_size)))))


def psnr(x_est, x_true, peak=1.0):
    """PSNR in dB, capped at 99 for identical inputs.

    Colour images give the mean of the per-channel values.
    """
    a, b = _pair(x_est, x_true)
    a, b = a.reshape(np.shape(x_true)), np.asarray(x_true, dtype=float)
    if a.ndim == 3:
        return float(np.mean([psnr(a[..., c], b[..., c], peak) for c in range(a.shape[2])]))
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(10.0 * np.log10(peak ** 2 / mse), PSNR_CAP))


def gaussian_window(size=SSIM_WIN, sigma=SSIM_SIGMA):
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (r / sigma) ** 2)
    g /= g.sum()
    return np.outer(g, g)


def _filt(x, w):
    return fftconvolve(x, w, mode="valid")


def _filt_adjoint(g, w):
    # w is symmetric, so the adjoint of valid filtering is full filtering.
    return fftconvolve(g, w, mode="full")


def ssim(x_est, x_true, peak=1.0, return_grad=False):
    """Mean SSIM over valid positions of an 11x11 Gaussian (std 1.5) window.

    Colour inputs are scored on BT.601 luminance. ``return_grad=True`` also
    returns the gradient with respect to ``x_est`` (grayscale only).
    """
    x = np.asarray(x_est, dtype=float)
    y = np.asarray(x_true, dtype=float)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if x.ndim == 3:
        if return_grad:
            raise ValueError("SSIM gradient is only defined for grayscale inputs")
        x, y = to_luminance(x), to_luminance(y)
    if min(x.shape) < SSIM_WIN:
        raise ValueError(f"SSIM needs images of at least {SSIM_WIN}x{SSIM_WIN}")
    w = gaussian_window()
    C1, C2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    mx, my = _filt(x, w), _filt(y, w)
    sxx = _filt(x * x, w) - mx * mx
    syy = _filt(y * y, w) - my * my
    sxy = _filt(x * y, w) - mx * my
    A1, A2 = 2 * mx * my + C1, 2 * sxy + C2
    B1, B2 = mx * mx + my * my + C1, sxx + syy + C2
    S = (A1 * A2) / (B1 * B2)
    val = float(np.mean(S))
    if not return_grad:
        return val
    n = S.size
    g_m = S * (2 * my / A1 - 2 * my / A2 - 2 * mx / B1 + 2 * mx / B2) / n
    g_xx = -S / B2 / n
    g_xy = 2 * S / A2 / n
    grad = _filt_adjoint(g_m, w) + 2 * x * _filt_adjoint(g_xx, w) + y * _filt_adjoint(g_xy, w)
    return val, grad


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class ScoreReport:
    rows: list = field(default_factory=list)

    def aggregate(self):
        out = {}
        for m in METRICS:
            vals = np.array([r[m] for r in self.rows], dtype=float)
            out[m] = dict(mean=float(np.mean(vals)), std=float(np.std(vals)))
        out["n"] = len(self.rows)
        return out


def score_sample(x_est, x_true, h_est, h_true, pad_size=64):
    return dict(kernel_mse=kernel_mse(h_est, h_true),
                kernel_hinf=kernel_hinf(h_est, h_true, pad_size),
                kernel_mae=kernel_mae(h_est, h_true),
                psnr=psnr(x_est, x_true), ssim=ssim(x_est, x_true))


def read_manifest(path):
    path = Path(path)
    records = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                records.append(json.loads(line))
    return records


def _resolve(base, p):
    p = Path(p)
    return p if p.is_absolute() else base / p


def evaluate(manifest, results_dir, pad_size=64, out_prefix="report"):
    """Score ``results_dir/<sample_id>.png`` and ``<sample_id>_kernel.csv``
    against the clean images and kernels listed in ``manifest``.

    Writes ``<out_prefix>.csv`` and ``<out_prefix>.json`` into ``results_dir``.
    """
    manifest = Path(manifest)
    results_dir = Path(results_dir)
    base = manifest.parent
    report = ScoreReport()
    for rec in read_manifest(manifest):
        sid = rec["sample_id"]
        img_p = results_dir / f"{sid}.png"
        ker_p = results_dir / f"{sid}_kernel.csv"
        if not (img_p.exists() and ker_p.exists()):
            continue
        x_true = read_image(_resolve(base, rec["clean_path"]))
        h_true = read_kernel_csv(_resolve(base, rec["kernel_path"]))
        row = dict(sample_id=sid)
        row.update(score_sample(read_image(img_p), x_true, read_kernel_csv(ker_p), h_true, pad_size))
        report.rows.append(row)
    if not report.rows:
        raise ValueError(f"no results in {results_dir} match entries of {manifest}")
    write_csv(results_dir / f"{out_prefix}.csv", report.rows, ("sample_id",) + METRICS)
    write_json(results_dir / f"{out_prefix}.json", report.aggregate())
    return report
