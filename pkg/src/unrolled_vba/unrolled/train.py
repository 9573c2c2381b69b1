"""Greedy (per-layer kernel MSE) and end-to-end (SSIM) training."""

import logging
import time
import warnings
from dataclasses import dataclass

import numpy as np

from ..errors import NumericalFailure, TrainingDiverged
from ..metrics import kernel_mse, ssim
from ..operators import kernel_from_z
from ..vba import initial_state
from .backprop import CG_MODES, StateGrad, backward_layers
from .net import layer_forward, net_forward

log = logging.getLogger(__name__)

MODES = ("greedy", "end-to-end")
LOSSES = ("kernel-mse", "ssim")
DEFAULT_LOSS = {"greedy": "kernel-mse", "end-to-end": "ssim"}


@dataclass
class TrainRun:
    """Optimizer and schedule settings for one training stage.

    ``weight_decay`` is a decoupled per-step shrink factor:
    ``theta <- (1 - weight_decay) * theta`` before each Adam step.
    With ``init_search`` (greedy mode, ``epochs > 0``) each layer starts
    from the best point of a coarse parameter grid (``init_grid``, keyed by
    parameter name) or its current value, whichever has the lower loss.
    """

    mode: str = "greedy"
    loss: str = None
    lr: float = 0.05
    epochs: int = 10
    batch_size: int = 10
    weight_decay: float = 0.0
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    cg_mode: str = "unrolled"
    init_search: bool = True
    init_grid: dict = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown training mode {self.mode!r}")
        if self.loss is None:
            self.loss = DEFAULT_LOSS[self.mode]
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.loss != DEFAULT_LOSS[self.mode]:
            warnings.warn(f"non-standard pairing: {self.mode} training with {self.loss} loss")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("need epochs >= 0, batch_size >= 1 and lr > 0")
        if not 0.0 <= self.weight_decay < 1.0:
            raise ValueError("weight_decay must lie in [0, 1)")
        if self.cg_mode not in CG_MODES:
            raise ValueError(f"unknown cg_mode {self.cg_mode!r}")


class Adam:
    """Bias-corrected adaptive moments with decoupled weight decay."""

    def __init__(self, size, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.lr, self.b1, self.b2, self.eps, self.wd = lr, betas[0], betas[1], eps, weight_decay
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params, grad):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad ** 2
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        return (1.0 - self.wd) * params - self.lr * mhat / (np.sqrt(vhat) + self.eps)


DEFAULT_INIT_GRID = {
    "theta_xi": (-8.0, -6.0, -4.0, -2.0, 0.0, 2.0),
    "rho": (-2.0, 0.0, 2.0),
    "tau": (-12.0, -8.0, -6.0, -4.0),
}


def _grid_candidates(net, k, grid):
    base = net.layer_vector(k)
    axes = [grid.get(n, (base[i],)) for i, n in enumerate(net.trainable)]
    mesh = np.meshgrid(*[np.asarray(a, dtype=float) for a in axes], indexing="ij")
    cands = np.stack([m.ravel() for m in mesh], axis=1)
    return np.vstack([base[None], cands])


def _search_layer_init(net, k, states, ctx, samples, loss, grid):
    """Best grid point (or the current vector) for layer ``k`` by mean loss."""
    model = net.template.model
    best, best_val = None, np.inf
    for cand in _grid_candidates(net, k, grid):
        net.set_layer_vector(k, cand)
        try:
            vals = [_state_loss(loss, layer_forward(s, net, k, c), smp, model)[0]
                    for s, c, smp in zip(states, ctx, samples)]
        except (NumericalFailure, np.linalg.LinAlgError):
            continue
        v = float(np.mean(vals))
        if np.isfinite(v) and v < best_val:
            best, best_val = cand, v
    if best is None:
        raise NumericalFailure(f"no finite starting point for layer {k}")
    net.set_layer_vector(k, best)
    return best, best_val


def _state_loss(loss, state, sample, model):
    """Loss on a state and its adjoint (``1 - SSIM`` for the SSIM loss)."""
    g = StateGrad.zeros(state.image.mean.shape, model.P)
    if loss == "kernel-mse":
        h = kernel_from_z(model, state.kernel.mean)
        h_true = np.asarray(sample.kernel, dtype=float).ravel()
        g.z = model.T.T @ (2.0 * (h - h_true))
        return kernel_mse(h, h_true), g
    val, grad = ssim(state.image.mean, sample.clean, return_grad=True)
    g.x = -grad
    return 1.0 - val, g


def _batches(n, batch_size, rng):
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def _diverged(msg, curves):
    return TrainingDiverged(msg, curves=curves)


def greedy_train(net, samples, run, validation=()):
    """Train layers ``0..K-1`` in order, each against its own output loss.

    Earlier layers are frozen; layer ``k``'s inputs are recomputed with the
    already-trained layers. Returns ``(net, curves)`` where ``curves`` has
    one row per (layer, epoch) plus ``layer_mse``: the mean training loss
    after each trained layer.
    """
    if len(samples) == 0:
        raise ValueError("training set is empty")
    net = net.copy()
    model = net.template.model
    rng = np.random.default_rng(run.seed)
    ctx = [net.context(s.observed, s.sigma) for s in samples]
    vctx = [net.context(s.observed, s.sigma) for s in validation]
    states = [initial_state(s.observed, net.template) for s in samples]
    vstates = [initial_state(s.observed, net.template) for s in validation]
    curves = dict(rows=[], layer_loss=[], layer_val_loss=[])
    t0 = time.perf_counter()
    try:
        for k in range(net.K):
            if run.init_search and run.epochs > 0:
                _, v0 = _search_layer_init(net, k, states, ctx, samples, run.loss,
                                           run.init_grid or DEFAULT_INIT_GRID)
                log.info("layer %d grid start, train loss %.6g", k, v0)
            theta = net.layer_vector(k)
            opt = Adam(theta.size, run.lr, run.adam_betas, run.adam_eps, run.weight_decay)
            for epoch in range(run.epochs):
                losses = []
                for batch in _batches(len(samples), run.batch_size, rng):
                    grad = np.zeros_like(theta)
                    for i in batch:
                        new, tape = layer_forward(states[i], net, k, ctx[i], tape=True)
                        val, g = _state_loss(run.loss, new, samples[i], model)
                        gr, _ = backward_layers(net, [tape], ctx[i], g, first_layer=k,
                                                cg_mode=run.cg_mode)
                        grad += gr[k]
                        losses.append(val)
                    grad /= len(batch)
                    if not (np.all(np.isfinite(grad)) and np.all(np.isfinite(losses))):
                        raise _diverged(f"non-finite loss or gradient at layer {k}", curves)
                    theta = opt.step(theta, grad)
                    net.set_layer_vector(k, theta)
                row = dict(layer=k, epoch=epoch + 1, train_loss=float(np.mean(losses)),
                           val_loss=_mean_layer_loss(net, k, vstates, vctx, validation, run.loss),
                           wall_time=time.perf_counter() - t0)
                curves["rows"].append(row)
                log.info("layer %d epoch %d train %.6g", k, epoch + 1, row["train_loss"])
            states = [layer_forward(s, net, k, c) for s, c in zip(states, ctx)]
            vstates = [layer_forward(s, net, k, c) for s, c in zip(vstates, vctx)]
            curves["layer_loss"].append(
                float(np.mean([_state_loss(run.loss, s, smp, model)[0]
                               for s, smp in zip(states, samples)])))
            if validation:
                curves["layer_val_loss"].append(
                    float(np.mean([_state_loss(run.loss, s, smp, model)[0]
                                   for s, smp in zip(vstates, validation)])))
    except (NumericalFailure, np.linalg.LinAlgError) as exc:
        raise _diverged(f"numerical failure during greedy training: {exc}", curves) from exc
    return net, curves


def _mean_layer_loss(net, k, states, ctxs, samples, loss):
    if not samples:
        return float("nan")
    model = net.template.model
    vals = [_state_loss(loss, layer_forward(s, net, k, c), smp, model)[0]
            for s, c, smp in zip(states, ctxs, samples)]
    return float(np.mean(vals))


def mean_ssim(net, samples):
    if not samples:
        return float("nan")
    return float(np.mean([ssim(net_forward(net, s.observed, sigma=s.sigma).x, s.clean)
                          for s in samples]))


def mean_kernel_mse(net, samples):
    return float(np.mean([kernel_mse(net_forward(net, s.observed, sigma=s.sigma).h, s.kernel)
                          for s in samples]))


def end_to_end_train(net, samples, run, validation=()):
    """Jointly train all layers on the final-layer loss (default ``1 - SSIM``).

    Returns ``(net, curves)``; ``curves["rows"]`` holds epoch 0 (the warm
    start) and every later epoch with train/validation SSIM.
    """
    if len(samples) == 0:
        raise ValueError("training set is empty")
    net = net.copy()
    model = net.template.model
    rng = np.random.default_rng(run.seed)
    theta = net.get_params()
    opt = Adam(theta.size, run.lr, run.adam_betas, run.adam_eps, run.weight_decay)
    curves = dict(rows=[])
    t0 = time.perf_counter()

    def record(epoch, train_loss):
        row = dict(epoch=epoch, train_loss=train_loss, train_ssim=mean_ssim(net, samples),
                   val_ssim=mean_ssim(net, list(validation)), wall_time=time.perf_counter() - t0)
        curves["rows"].append(row)
        log.info("epoch %d train ssim %.5f val ssim %.5f", epoch, row["train_ssim"],
                 row["val_ssim"])

    try:
        record(0, float("nan"))
        for epoch in range(run.epochs):
            losses = []
            for batch in _batches(len(samples), run.batch_size, rng):
                grad = np.zeros_like(theta)
                for i in batch:
                    s = samples[i]
                    out = net_forward(net, s.observed, sigma=s.sigma, keep_tapes=True)
                    val, g = _state_loss(run.loss, out.state, s, model)
                    ctx = net.context(s.observed, s.sigma)
                    gr, _ = backward_layers(net, out.tapes, ctx, g, cg_mode=run.cg_mode)
                    grad += np.concatenate([gr[k] for k in range(net.K)])
                    losses.append(val)
                grad /= len(batch)
                if not (np.all(np.isfinite(grad)) and np.all(np.isfinite(losses))):
                    raise _diverged(f"non-finite loss or gradient in epoch {epoch + 1}", curves)
                theta = opt.step(theta, grad)
                net.set_params(theta)
            record(epoch + 1, float(np.mean(losses)))
    except (NumericalFailure, np.linalg.LinAlgError) as exc:
        raise _diverged(f"numerical failure during end-to-end training: {exc}", curves) from exc
    return net, curves


def train(net, samples, run, validation=()):
    if run.mode == "greedy":
        return greedy_train(net, samples, run, validation)
    return end_to_end_train(net, samples, run, validation)
