"""Dense-matrix reference implementations used as independent test oracles.

Everything here assembles explicit matrices from index arithmetic and never
calls the operator code under test (only the kernel model's ``T`` and ``t``).
"""

import numpy as np

from unrolled_vba.vba import GammaFactor, GaussianImageFactor, GaussianKernelFactor, VbaState


def rel_err(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def offsets(side):
    c = (side - 1) // 2
    return [(a - c, b - c) for a in range(side) for b in range(side)]


def shift_matrix(shape, off):
    """``(S x)[i, j] = x[i - dy, j - dx]`` with periodic wrap."""
    H, W = shape
    N = H * W
    S = np.zeros((N, N))
    for i in range(H):
        for j in range(W):
            S[i * W + j, ((i - off[0]) % H) * W + (j - off[1]) % W] = 1.0
    return S


def shift_matrices(side, shape):
    return [shift_matrix(shape, o) for o in offsets(side)]


def conv_matrix(kernel, shape):
    k = np.asarray(kernel, dtype=float)
    side = int(round(np.sqrt(k.size)))
    return sum(w * S for w, S in zip(k.ravel(), shift_matrices(side, shape)))


def Kp_matrices(model, shape):
    """``[K_0, K_1, ..., K_P]`` with ``K_0`` built from ``t``."""
    S = shift_matrices(model.side, shape)
    cols = [model.t] + [model.T[:, p] for p in range(model.P)]
    return [sum(c[m] * S[m] for m in range(model.M)) for c in cols]


def diff_matrices(shape):
    """Horizontal and vertical forward differences with periodic wrap."""
    H, W = shape
    N = H * W
    Dh = np.zeros((N, N))
    Dv = np.zeros((N, N))
    for i in range(H):
        for j in range(W):
            r = i * W + j
            Dh[r, r] -= 1.0
            Dh[r, i * W + (j + 1) % W] += 1.0
            Dv[r, r] -= 1.0
            Dv[r, ((i + 1) % H) * W + j] += 1.0
    return Dh, Dv


def precision_matrix(state, config):
    """Dense image precision for a VBA state."""
    model = config.model
    shape = state.image.mean.shape
    h = model.T @ state.kernel.mean + model.t
    H = conv_matrix(h, shape)
    K = Kp_matrices(model, shape)[1:]
    C = state.kernel.cov
    blur = H.T @ H
    for p in range(model.P):
        for q in range(model.P):
            blur += C[p, q] * K[p].T @ K[q]
    Dh, Dv = diff_matrices(shape)
    kappa = config.prior.kappa
    lam = np.asarray(state.lam, dtype=float).ravel()
    w = kappa * lam ** (kappa - 1.0)
    gamma = state.gamma.shape / state.gamma.rate
    prior = Dh.T @ np.diag(w) @ Dh + Dv.T @ np.diag(w) @ Dv
    return config.beta * blur + 2.0 * gamma * prior


def kernel_stats(x, delta, y, model):
    """``(a, B)`` for ``p, q = 1..P`` from their defining expectations."""
    shape = x.shape
    K = Kp_matrices(model, shape)
    xv, yv = x.ravel(), y.ravel()
    Cx = np.diag(delta.ravel())
    n = model.P + 1
    B = np.zeros((n, n))
    for p in range(n):
        for q in range(n):
            B[p, q] = np.trace(K[p] @ Cx @ K[q].T) + xv @ K[p].T @ K[q] @ xv
    a = np.array([xv @ K[p].T @ yv - B[p, 0] for p in range(1, n)])
    return a, B[1:, 1:]


def kernel_posterior(a, B, config):
    model, prior = config.model, config.prior
    L = sar_L(model, prior.A)
    mu = np.linalg.lstsq(model.T, prior.m - model.t, rcond=None)[0]
    Pi = config.beta * B + config.xi * L
    C = np.linalg.inv(Pi)
    z = C @ (config.beta * a + config.xi * L @ mu)
    return z, C


def sar_L(model, A):
    G = model.T.T @ model.T
    inner = model.T.T @ np.linalg.inv(A.T @ A) @ model.T
    return G @ np.linalg.inv(inner) @ G


def expected_lambda(x, delta):
    """``E ||D_j x||^2`` from dense difference rows and a diagonal covariance."""
    Dh, Dv = diff_matrices(x.shape)
    xv, d = x.ravel(), delta.ravel()
    out = np.empty(x.size)
    for j in range(x.size):
        Dj = np.vstack([Dh[j], Dv[j]])
        out[j] = np.sum((Dj @ xv) ** 2) + np.trace(Dj.T @ Dj @ np.diag(d))
    return out.reshape(x.shape)


def random_state(rng, config, shape, cz_scale=1e-3):
    """A valid VBA state with random factors (kernel near the 3x3 / flat start)."""
    model = config.model
    x = rng.uniform(0, 1, shape)
    delta = rng.uniform(0.1, 1.0, shape)
    h0 = np.full(model.M, 1.0 / model.M) + 0.02 * rng.standard_normal(model.M)
    z = np.linalg.lstsq(model.T, h0 - model.t, rcond=None)[0]
    R = rng.standard_normal((model.P, model.P))
    cz = cz_scale * (R @ R.T / model.P + 0.1 * np.eye(model.P))
    lam = rng.uniform(0.01, 1.0, shape)
    gamma = GammaFactor(shape=x.size / (2 * config.prior.kappa), rate=float(rng.uniform(1, 10)))
    return VbaState(image=GaussianImageFactor(mean=x, cov_diag=delta),
                    kernel=GaussianKernelFactor(mean=z, cov=cz), lam=lam, gamma=gamma)
