"""Restoration pipelines behind the CLI: plain VBA, unrolled net, exports."""

import logging
import shlex
import subprocess
from pathlib import Path

import numpy as np

from .io import write_csv, write_image, write_json, write_kernel_csv
from .metrics import psnr
from .operators import kernel_from_z
from .unrolled.color import restore_color
from .unrolled.net import net_forward, noise_std_estimate
from .vba import vba_run

log = logging.getLogger(__name__)

TRACE_FIELDS = ("iteration", "surrogate_objective", "gamma", "cg_residual", "kernel_change_l2")


def deblur_plain(y, vba_section, sigma=None, xi=None, trace=None):
    """Plain VBA on one plane. Without ``sigma`` the wavelet estimate sets ``beta``.

    Returns ``(x, h, state, info)``.
    """
    if not np.all(np.isfinite(y)):
        raise ValueError("observation contains non-finite values")
    sig = float(sigma) if sigma is not None else noise_std_estimate(y)
    if sig <= 0:
        raise ValueError("noise level must be positive; pass --sigma for noiseless inputs")
    cfg = vba_section.vba_config(sigma=sig, xi=xi)
    state = vba_run(y, cfg, trace=trace)
    h = kernel_from_z(cfg.model, state.kernel.mean)
    info = dict(method="vba", xi=cfg.xi, beta=cfg.beta, sigma=sig,
                sigma_estimated=sigma is None, iterations=state.iteration)
    return state.image.mean, h, state, info


def deblur_net(y, net, sigma=None):
    if not np.all(np.isfinite(y)):
        raise ValueError("observation contains non-finite values")
    out = net_forward(net, y, sigma=sigma)
    info = dict(method="unrolled", K=net.K, xi=out.xis, beta=out.betas,
                sigma_hat=noise_std_estimate(y))
    return out.x, out.h, out.state, info


def restore(y, method, color=False):
    """Apply ``method`` (plane -> (x, h, state, info)) to a plane or an RGB image."""
    if color or np.ndim(y) == 3:
        if np.ndim(y) != 3:
            raise ValueError("--color needs an RGB input")
        box = {}

        def luma(plane):
            x, h, state, info = method(plane)
            box.update(state=state, info=info)
            return x, h

        x, h = restore_color(y, luma)
        box["info"]["color"] = "yuv"
        return x, h, box["state"], box["info"]
    return method(y)


def tune_xi(samples, vba_section, grid):
    """Grid value of ``xi`` with the highest mean PSNR on ``samples``.

    Returns ``(best_xi, {xi: mean_psnr})``; samples carry their known sigma.
    """
    if not samples:
        raise ValueError("xi tuning needs at least one validation sample")
    table = {}
    for xi in grid:
        vals = [psnr(deblur_plain(s.observed, vba_section, sigma=s.sigma, xi=xi)[0], s.clean)
                for s in samples]
        table[float(xi)] = float(np.mean(vals))
        log.info("xi %g: mean validation PSNR %.3f", xi, table[float(xi)])
    best = max(table, key=lambda k: (table[k], -k))
    return best, table


def export_result(out_dir, stem, x, h, state, info, trace=None, post_process_cmd=None):
    """Write ``<stem>.png``, ``<stem>_kernel.csv``, ``<stem>_z.csv`` and
    ``<stem>_summary.json`` (plus ``<stem>_trace.csv`` if a trace is given)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    img = out_dir / f"{stem}.png"
    write_image(img, x)
    write_kernel_csv(out_dir / f"{stem}_kernel.csv", h)
    z, cz = state.kernel.mean, state.kernel.cov
    write_csv(out_dir / f"{stem}_z.csv",
              [dict(index=i, z=repr(float(z[i])), cz_diag=repr(float(cz[i, i])))
               for i in range(z.size)], ("index", "z", "cz_diag"))
    g = state.gamma
    summary = dict(info, gamma=g.mean, gamma_shape=g.shape, gamma_rate=g.rate)
    write_json(out_dir / f"{stem}_summary.json", summary)
    if trace:
        write_csv(out_dir / f"{stem}_trace.csv", trace, TRACE_FIELDS)
    if post_process_cmd:
        subprocess.run(shlex.split(post_process_cmd) + [str(img)], check=True)
    return img
