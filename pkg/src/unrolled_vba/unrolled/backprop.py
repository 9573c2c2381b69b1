"""Hand-written reverse mode through the unrolled layers.

Every sweep is differentiated update by update: the image mean through
the recorded CG recursion (or implicitly, through the adjoint system),
the diagonal covariance through its closed form, the kernel posterior
through the Cholesky solve, then ``lambda`` and ``gamma``.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from ..errors import NumericalFailure
from ..metrics import kernel_mse, ssim
from ..operators import (
    apply_D,
    apply_D_adjoint,
    apply_all_Kp_adjoint,
    circular_xcorr,
    kernel_from_z,
    lag_kernel_adjoint,
    wrapped_lag_index,
)
from ..vba import cg_solve
from .net import kernel_features, kernel_features_vjp, net_forward, sigmoid, softplus

CG_MODES = ("unrolled", "implicit")


@dataclass
class StateGrad:
    """Adjoints of the state fields a sweep reads or writes."""

    x: np.ndarray
    delta: np.ndarray
    z: np.ndarray
    cz: np.ndarray
    lam: np.ndarray
    gamma: float = 0.0

    @classmethod
    def zeros(cls, shape, P):
        return cls(x=np.zeros(shape), delta=np.zeros(shape), z=np.zeros(P),
                   cz=np.zeros((P, P)), lam=np.zeros(shape), gamma=0.0)


class _PrecisionAdjoint:
    """Accumulates parameter adjoints of ``v -> A v`` and of ``diag(A)``.

    Blur-term adjoints are kept as a running cross-correlation in the
    Fourier domain; ``finish`` converts them to the lag kernel.
    """

    def __init__(self, prec):
        self.prec = prec
        self.xc_hat = 0.0
        self.xc00 = 0.0
        self.gamma = 0.0
        self.w = np.zeros(prec.shape)

    def apply(self, u, v):
        """Record ``<u, A(theta) v>`` for the adjoint ``u`` of an output."""
        self.xc_hat = self.xc_hat + np.fft.rfft2(u) * np.conj(np.fft.rfft2(v))
        Du, Dv = apply_D(u), apply_D(v)
        prod = Du[0] * Dv[0] + Du[1] * Dv[1]
        self.gamma += 2.0 * float(np.vdot(self.prec.w, prod))
        self.w += 2.0 * self.prec.gamma * prod

    def diagonal(self, gdiag):
        p = self.prec
        self.xc00 += float(np.sum(gdiag))
        tv = 2.0 * p.w + np.roll(p.w, 1, axis=1) + np.roll(p.w, 1, axis=0)
        self.gamma += 2.0 * float(np.vdot(gdiag, tv))
        self.w += 2.0 * p.gamma * (2.0 * gdiag + np.roll(gdiag, -1, axis=1)
                                    + np.roll(gdiag, -1, axis=0))

    def finish(self):
        """Returns ``(beta_bar, W_bar, gamma_bar, w_bar)``."""
        p = self.prec
        if np.isscalar(self.xc_hat):
            xc = np.zeros(p.shape)
        else:
            xc = np.fft.irfft2(self.xc_hat, s=p.shape)
        xc[0, 0] += self.xc00
        beta_bar = float(np.vdot(p.g_emb, xc))
        side = p.model.side
        g_bar = (p.beta * xc).ravel()[wrapped_lag_index(side, p.shape)]
        return beta_bar, lag_kernel_adjoint(g_bar, side), self.gamma, self.w


def _cg_reverse(apply_A, tr, n, xbar, acc):
    """Exact reverse of the recorded CG recursion. Returns ``(b_bar, x0_bar)``."""
    if n == 0:
        return np.zeros_like(xbar), xbar.copy()
    rho = tr["rho"]
    rhobar = np.zeros(n + 1)
    rbar = np.zeros_like(xbar)
    pbar_next = None
    for i in range(n - 1, -1, -1):
        p, q, r_next = tr["p"][i], tr["q"][i], tr["r"][i]
        alpha, pq = tr["alpha"][i], tr["pq"][i]
        if tr["has_next"][i]:
            beta = tr["beta"][i]
            rbar = rbar + pbar_next
            betabar = float(np.vdot(pbar_next, p))
            pbar = beta * pbar_next
            rhobar[i + 1] += betabar / rho[i]
            rhobar[i] -= betabar * rho[i + 1] / rho[i] ** 2
        else:
            pbar = np.zeros_like(xbar)
        rbar = rbar + 2.0 * rhobar[i + 1] * r_next
        alphabar = -float(np.vdot(rbar, q)) + float(np.vdot(xbar, p))
        qbar = -alpha * rbar
        pbar = pbar + alpha * xbar
        rhobar[i] += alphabar / pq
        pqbar = -alphabar * rho[i] / pq ** 2
        pbar = pbar + pqbar * q
        qbar = qbar + pqbar * p
        pbar = pbar + apply_A(qbar)
        acc.apply(qbar, p)
        pbar_next = pbar
    rbar = rbar + pbar_next + 2.0 * rhobar[0] * tr["r0"]
    acc.apply(-rbar, tr["x0"])
    return rbar, xbar - apply_A(rbar)


def _cg_implicit(apply_A, x_star, xbar, acc, tol=1e-10, iters=2000):
    """Adjoint-system gradient of the exact solve at the returned iterate."""
    if not np.any(xbar):
        return np.zeros_like(xbar), np.zeros_like(xbar), True
    res = cg_solve(apply_A, xbar, iters=iters, tol=tol)
    ok = res.relative_residual <= 1e3 * tol
    acc.apply(-res.x, x_star)
    return res.x, np.zeros_like(xbar), ok


def sweep_vjp(tape, g, cg_mode="unrolled"):
    """Pull ``g`` (adjoints of the sweep outputs) back through one sweep.

    Returns ``(StateGrad for the input state, xi_bar, beta_bar)``.
    """
    if cg_mode not in CG_MODES:
        raise ValueError(f"unknown cg_mode {cg_mode!r}")
    cfg = tape.config
    model, prior = cfg.model, cfg.prior
    kappa, beta = prior.kappa, cfg.beta
    s_in = tape.state_in
    x, delta = tape.image.mean, tape.image.cov_diag
    y = tape.y
    T = model.T

    gx = np.array(g.x, dtype=float)
    gdelta = np.array(g.delta, dtype=float)
    glam = np.array(g.lam, dtype=float)

    # gamma (mean d/b, b = sum lam**kappa + eta)
    if g.gamma:
        d, b = tape.gamma.shape, tape.gamma.rate
        glam = glam + (-g.gamma * d / b ** 2) * kappa * tape.lam ** (kappa - 1.0)

    # lambda = max(E||D_j x||^2, floor)
    ge = glam * (tape.e_lam > cfg.lambda_floor)
    Dx = apply_D(x)
    gx += apply_D_adjoint(2.0 * ge[None] * Dx)
    gdelta += 2.0 * ge + np.roll(ge, 1, axis=1) + np.roll(ge, 1, axis=0)

    # kernel posterior: Pi = sym(beta B + xi L), C = Pi^-1, z = Pi^-1 r
    C, z, r = tape.kernel.cov, tape.kernel.mean, tape.r_z
    gz = np.asarray(g.z, dtype=float)
    gC = 0.5 * (g.cz + g.cz.T)
    Cgz = C @ gz
    gr = Cgz
    gPi = -C @ gC @ C - np.outer(Cgz, z)
    gPi = 0.5 * (gPi + gPi.T)
    B_full, a = tape.B_full, tape.a
    beta_bar = float(np.sum(gPi * B_full[1:, 1:]) + gr @ a)
    xi_bar = float(np.sum(gPi * prior.L) + gr @ prior.L_mu)
    gB, ga = beta * gPi, beta * gr

    # kernel statistics
    P = model.P
    gBf = np.zeros((P + 1, P + 1))
    gBf[1:, 1:] = gB
    gBf[1:, 0] -= ga
    U = tape.U
    gU = np.tensordot(gBf + gBf.T, U, axes=1)
    gU[1:] += ga[:, None, None] * y
    gdelta += float(np.sum(gBf * model.gram_ext))
    gx += apply_all_Kp_adjoint(model, gU)

    # image factor: delta = 1 / diag(A), x = CG(A, beta H^T y, x0)
    prec = tape.precision
    acc = _PrecisionAdjoint(prec)
    acc.diagonal(-gdelta * delta ** 2)
    cg = tape.cg
    ok = True
    if cg_mode == "implicit":
        g_rhs, g_x0, ok = _cg_implicit(prec, cg.x, gx, acc)
        if not ok:
            warnings.warn("adjoint CG did not converge; using the unrolled CG gradient",
                          RuntimeWarning)
            acc = _PrecisionAdjoint(prec)
            acc.diagonal(-gdelta * delta ** 2)
    if cg_mode == "unrolled" or not ok:
        g_rhs, g_x0 = _cg_reverse(prec, cg.trace, cg.iterations, gx, acc)
    beta_bar += float(np.vdot(g_rhs, tape.HTy))
    gh = beta * circular_xcorr(y, g_rhs).ravel()[_offset_index(model, y.shape)]

    pb, W_bar, gamma_bar, w_bar = acc.finish()
    beta_bar += pb
    gh = gh + (W_bar + W_bar.T) @ prec.h
    out = StateGrad(
        x=g_x0,
        delta=np.zeros_like(x),
        z=T.T @ gh,
        cz=T.T @ W_bar @ T,
        lam=w_bar * kappa * (kappa - 1.0) * s_in.lam ** (kappa - 2.0),
        gamma=gamma_bar,
    )
    return out, xi_bar, beta_bar


def _offset_index(model, shape):
    o = model.offsets
    return (o[:, 0] % shape[0]) * shape[1] + o[:, 1] % shape[1]


# ---------------------------------------------------------------------------
# parameter gradients


def _layer_param_grad(net, k, tape, ctx, xi_bar, beta_bar):
    """Gradient of layer ``k``'s trainable vector and the ``h`` adjoint from
    the optional kernel-feature input of the xi map."""
    lp = net.layers[k]
    model = net.template.model
    h_in = kernel_from_z(model, tape.state_in.kernel.mean)
    pre = lp.theta_xi
    feats = None
    if net.xi_features:
        feats = kernel_features(h_in)
        pre = pre + float(np.dot(lp.xi_weights, feats))
    pre_bar = xi_bar * net.xi_scale * float(sigmoid(pre))
    grads = dict(theta_xi=pre_bar, rho=0.0, tau=0.0)
    if ctx.beta_fixed is None:
        sig = softplus(lp.rho) * ctx.sigma_hat + softplus(lp.tau)
        sig_bar = -2.0 * beta_bar * sig ** -3.0
        grads["rho"] = sig_bar * ctx.sigma_hat * float(sigmoid(lp.rho))
        grads["tau"] = sig_bar * float(sigmoid(lp.tau))
    h_bar = np.zeros_like(h_in)
    if feats is not None:
        for i in range(len(feats)):
            grads[f"xi_w{i}"] = pre_bar * feats[i]
        h_bar = pre_bar * kernel_features_vjp(h_in, np.asarray(lp.xi_weights))
    vec = np.array([grads.get(n, 0.0) for n in net.trainable])
    return vec, h_bar


def backward_layers(net, tapes, ctx, g, first_layer=0, cg_mode="unrolled"):
    """Reverse pass over recorded layers ``first_layer, first_layer + 1, ...``.

    ``tapes[i]`` belongs to layer ``first_layer + i``. Returns the per-layer
    gradient vectors (keyed by layer index) and the adjoint of the input state.
    """
    grads = {}
    T = net.template.model.T
    for i in range(len(tapes) - 1, -1, -1):
        k = first_layer + i
        g, xi_bar, beta_bar = sweep_vjp(tapes[i], g, cg_mode)
        vec, h_bar = _layer_param_grad(net, k, tapes[i], ctx, xi_bar, beta_bar)
        g.z = g.z + T.T @ h_bar
        grads[k] = vec
    return grads, g


def loss_and_output_grad(loss, out, target, model):
    """Value of the loss and its adjoint on the final state."""
    shape = out.x.shape
    g = StateGrad.zeros(shape, model.P)
    if loss == "kernel-mse":
        h_true = np.asarray(target, dtype=float).ravel()
        g.z = model.T.T @ (2.0 * (out.h - h_true))
        return kernel_mse(out.h, h_true), g
    if loss == "ssim":
        val, grad = ssim(out.x, target, return_grad=True)
        g.x = -grad
        return 1.0 - val, g
    raise ValueError(f"unknown loss {loss!r}")


def analytic_gradient(net, y, loss, target, sigma=None, cg_mode="unrolled"):
    """Loss and its gradient with respect to ``net.get_params()``.

    ``loss`` is ``"kernel-mse"`` (``target`` = true kernel) or ``"ssim"``
    (``target`` = clean image, the loss being ``1 - SSIM``).
    """
    out = net_forward(net, y, sigma=sigma, keep_tapes=True)
    val, g = loss_and_output_grad(loss, out, target, net.template.model)
    ctx = net.context(y, sigma)
    grads, _ = backward_layers(net, out.tapes, ctx, g, cg_mode=cg_mode)
    return val, np.concatenate([grads[k] for k in range(net.K)])


def fd_gradient(loss_fn, params, epsilon=1e-4):
    """Central differences with step ``epsilon * max(1, |theta_i|)``."""
    params = np.asarray(params, dtype=float)
    grad = np.zeros_like(params)
    for i in range(params.size):
        h = epsilon * max(1.0, abs(params[i]))
        tp, tm = params.copy(), params.copy()
        tp[i] += h
        tm[i] -= h
        fp, fm = float(loss_fn(tp)), float(loss_fn(tm))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalFailure(f"non-finite loss while differencing parameter {i}")
        grad[i] = (fp - fm) / (tp[i] - tm[i])
    return grad


def net_loss_fn(net, y, loss, target, sigma=None):
    """``theta -> loss`` closure for :func:`fd_gradient`."""

    def f(theta):
        out = net_forward(net.with_params(theta), y, sigma=sigma)
        return loss_and_output_grad(loss, out, target, net.template.model)[0]

    return f
