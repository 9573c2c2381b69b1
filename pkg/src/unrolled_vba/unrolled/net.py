"""Unrolled VBA: K sweeps as layers with learned per-layer ``xi`` and ``beta``."""

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from typing import List, Optional

import numpy as np

from ..operators import kernel_from_z
from ..vba import SweepTape, VbaConfig, initial_state, vba_sweep, with_hyperparameters

PARAM_NAMES = ("theta_xi", "rho", "tau")
N_XI_FEATURES = 3
_MAD_TO_STD = 0.6745


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def haar_diagonal(y):
    """First-level orthonormal Haar HH coefficients (odd edges are cropped)."""
    y = np.asarray(y, dtype=float)
    if y.ndim != 2 or min(y.shape) < 2:
        raise ValueError(f"need a 2D image of at least 2x2, got shape {y.shape}")
    H, W = y.shape[0] // 2 * 2, y.shape[1] // 2 * 2
    y = y[:H, :W]
    return 0.5 * (y[0::2, 0::2] - y[0::2, 1::2] - y[1::2, 0::2] + y[1::2, 1::2])


def noise_std_estimate(y):
    """Median absolute deviation of the finest diagonal Haar band, over 0.6745."""
    return float(np.median(np.abs(haar_diagonal(y))) / _MAD_TO_STD)


def kernel_features(h, eps=1e-12):
    """(l2 norm, entropy of the positive part, max value) of a kernel."""
    h = np.asarray(h, dtype=float)
    hp = np.maximum(h, eps)
    p = hp / hp.sum()
    return np.array([np.linalg.norm(h), -np.sum(p * np.log(p)), np.max(h)])


def kernel_features_vjp(h, gf, eps=1e-12):
    """Gradient of ``gf . kernel_features(h)`` with respect to ``h``."""
    h = np.asarray(h, dtype=float)
    out = np.zeros_like(h)
    nrm = np.linalg.norm(h)
    if nrm > 0:
        out += gf[0] * h / nrm
    hp = np.maximum(h, eps)
    S = hp.sum()
    p = hp / S
    ent = -np.sum(p * np.log(p))
    out += gf[1] * (-(np.log(p) + ent) / S) * (h > eps)
    out[np.argmax(h)] += gf[2]
    return out


@dataclass
class LayerParams:
    theta_xi: float = 0.0
    rho: float = 0.0
    tau: float = 0.0
    xi_weights: tuple = (0.0,) * N_XI_FEATURES


def xi_map(layer, h_current=None, scale=1.0, use_features=False):
    """``xi = scale * Softplus(theta_xi [+ w . features(h)])``."""
    pre = layer.theta_xi
    if use_features:
        pre = pre + float(np.dot(layer.xi_weights, kernel_features(h_current)))
    return float(scale * softplus(pre))


def beta_map(layer, sigma_hat):
    """``(Softplus(rho) * sigma_hat + Softplus(tau))**-2``."""
    if sigma_hat < 0:
        raise ValueError("sigma_hat must be nonnegative")
    sigma = softplus(layer.rho) * sigma_hat + softplus(layer.tau)
    return float(sigma ** -2.0)


@dataclass
class LayerContext:
    """Per-observation inputs shared by all layers."""

    y: np.ndarray
    sigma_hat: float
    beta_fixed: Optional[float] = None


@dataclass
class UnrolledNet:
    """K layers sharing one VBA template.

    ``beta_mode="learned"`` maps the wavelet noise estimate through each
    layer's ``(rho, tau)``; ``"fixed"`` uses a known noise level (passed at
    forward time, else ``template.beta``) and leaves ``rho, tau`` untrained.
    ``xi_scale`` multiplies every layer's Softplus output.
    """

    layers: List[LayerParams]
    template: VbaConfig
    beta_mode: str = "learned"
    xi_scale: float = 1.0
    xi_features: bool = False
    trainable: Optional[tuple] = None

    def __post_init__(self):
        if len(self.layers) < 1:
            raise ValueError("an unrolled net needs at least one layer")
        if self.beta_mode not in ("learned", "fixed"):
            raise ValueError(f"unknown beta_mode {self.beta_mode!r}")
        if self.trainable is None:
            names = PARAM_NAMES if self.beta_mode == "learned" else ("theta_xi",)
            if self.xi_features:
                names = names + tuple(f"xi_w{i}" for i in range(N_XI_FEATURES))
            self.trainable = names

    @classmethod
    def create(cls, K, template, **kwargs):
        return cls(layers=[LayerParams() for _ in range(K)], template=template, **kwargs)

    @property
    def K(self):
        return len(self.layers)

    def layer_vector(self, k):
        lp = self.layers[k]
        out = []
        for name in self.trainable:
            out.append(lp.xi_weights[int(name[4:])] if name.startswith("xi_w") else getattr(lp, name))
        return np.array(out, dtype=float)

    def set_layer_vector(self, k, vec):
        lp = self.layers[k]
        w = list(lp.xi_weights)
        kw = {}
        for name, v in zip(self.trainable, vec):
            if name.startswith("xi_w"):
                w[int(name[4:])] = float(v)
            else:
                kw[name] = float(v)
        self.layers[k] = replace(lp, xi_weights=tuple(w), **kw)

    def get_params(self):
        return np.concatenate([self.layer_vector(k) for k in range(self.K)])

    def set_params(self, vec):
        n = len(self.trainable)
        vec = np.asarray(vec, dtype=float)
        if vec.size != n * self.K:
            raise ValueError(f"expected {n * self.K} parameters, got {vec.size}")
        for k in range(self.K):
            self.set_layer_vector(k, vec[k * n:(k + 1) * n])

    def copy(self):
        return replace(self, layers=[replace(lp) for lp in self.layers])

    def with_params(self, vec):
        net = self.copy()
        net.set_params(vec)
        return net

    def context(self, y, sigma=None):
        beta_fixed = None
        if self.beta_mode == "fixed":
            beta_fixed = float(sigma) ** -2.0 if sigma is not None else self.template.beta
        return LayerContext(y=np.asarray(y, dtype=float), sigma_hat=noise_std_estimate(y),
                            beta_fixed=beta_fixed)

    def layer_config(self, k, state, ctx):
        """The VBA configuration layer ``k`` applies to ``state``."""
        layer = self.layers[k]
        h = kernel_from_z(self.template.model, state.kernel.mean)
        xi = xi_map(layer, h, self.xi_scale, self.xi_features)
        beta = ctx.beta_fixed if ctx.beta_fixed is not None else beta_map(layer, ctx.sigma_hat)
        return with_hyperparameters(self.template, xi=xi, beta=beta)

    def template_hash(self):
        return config_hash(self.template)


def config_hash(config):
    keys = dict(side=config.model.side, constraints=list(config.model.constraints),
                kappa=config.prior.kappa, alpha=config.prior.alpha, eta=config.prior.eta,
                cg_iterations=config.cg_iterations, cg_tolerance=config.cg_tolerance,
                cz_init_scale=config.cz_init_scale, init_kernel_width=config.init_kernel_width,
                lambda_floor=config.lambda_floor, init_lambda_cov=config.init_lambda_cov)
    return hashlib.sha256(json.dumps(keys, sort_keys=True).encode()).hexdigest()[:16]


def layer_forward(state, net, k, ctx, tape=False):
    """Apply layer ``k``: pick ``(xi, beta)`` then run one VBA sweep.

    With ``tape=True`` returns ``(state, SweepTape)``.
    """
    config = net.layer_config(k, state, ctx)
    tp = SweepTape(state_in=state, config=config, y=ctx.y) if tape else None
    new, _ = vba_sweep(state, config, ctx.y, tp)
    return (new, tp) if tape else new


@dataclass
class NetOutput:
    x: np.ndarray
    z: np.ndarray
    h: np.ndarray
    cz: np.ndarray
    state: object
    kernels: list = field(default_factory=list)
    xis: list = field(default_factory=list)
    betas: list = field(default_factory=list)
    tapes: Optional[list] = None

    def layer_mse(self, h_true):
        """Kernel squared error after every layer."""
        h_true = np.asarray(h_true, dtype=float).ravel()
        return [float(np.sum((h - h_true) ** 2)) for h in self.kernels]


def net_forward(net, y, sigma=None, keep_tapes=False, post_process=None):
    """Initialize as the plain algorithm, run all layers, map ``z_K`` to ``h_K``.

    ``post_process`` is an optional callable applied to the restored image.
    """
    y = np.asarray(y, dtype=float)
    ctx = net.context(y, sigma)
    state = initial_state(y, net.template)
    model = net.template.model
    out = NetOutput(x=None, z=None, h=None, cz=None, state=None,
                    tapes=[] if keep_tapes else None)
    for k in range(net.K):
        cfg = net.layer_config(k, state, ctx)
        out.xis.append(cfg.xi)
        out.betas.append(cfg.beta)
        if keep_tapes:
            state, tp = layer_forward(state, net, k, ctx, tape=True)
            out.tapes.append(tp)
        else:
            state = layer_forward(state, net, k, ctx)
        out.kernels.append(kernel_from_z(model, state.kernel.mean))
    out.state = state
    out.x = state.image.mean if post_process is None else post_process(state.image.mean)
    out.z = state.kernel.mean
    out.h = out.kernels[-1]
    out.cz = state.kernel.cov
    return out


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, net, metadata=None):
    payload = dict(
        K=net.K,
        layers=[dict(theta_xi=lp.theta_xi, rho=lp.rho, tau=lp.tau,
                     xi_weights=list(lp.xi_weights)) for lp in net.layers],
        beta_mode=net.beta_mode,
        xi_scale=net.xi_scale,
        xi_features=net.xi_features,
        trainable=list(net.trainable),
        template_hash=net.template_hash(),
        metadata=metadata or {},
    )
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def load_checkpoint(path, template, strict=True):
    """Rebuild a net from a checkpoint; ``strict`` checks the template hash."""
    with open(path) as fh:
        payload = json.load(fh)
    if strict and payload.get("template_hash") not in (None, config_hash(template)):
        raise ValueError(f"{path}: checkpoint was trained with a different VBA template")
    layers = [LayerParams(theta_xi=d["theta_xi"], rho=d["rho"], tau=d["tau"],
                          xi_weights=tuple(d.get("xi_weights", (0.0,) * N_XI_FEATURES)))
              for d in payload["layers"]]
    if len(layers) != payload["K"]:
        raise ValueError(f"{path}: K does not match the number of layers")
    net = UnrolledNet(layers=layers, template=template, beta_mode=payload["beta_mode"],
                      xi_scale=payload.get("xi_scale", 1.0),
                      xi_features=payload.get("xi_features", False),
                      trainable=tuple(payload["trainable"]) if "trainable" in payload else None)
    return net, payload.get("metadata", {})


def layer_params_dict(net):
    return [asdict(lp) for lp in net.layers]
