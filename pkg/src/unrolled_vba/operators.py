"""Kernel parametrization, circular blur operators and prior construction.

Images are 2D float arrays of shape ``(H, W)``. A kernel of odd side ``s``
is stored either as a flat vector of length ``M = s*s`` (row-major) or as an
``(s, s)`` array. Entry ``m = a*s + b`` of the flat kernel acts through the
circular shift by the offset ``(a - c, b - c)``, ``c = (s - 1) // 2``, so that

    H x = sum_m h_m S_m x

is the circular convolution of ``x`` with the centered kernel.

Index ``p = 0`` of the extended parametrization refers to the affine offset
``t`` (the operator ``K_0``); ``p = 1..P`` refer to the columns of ``T``.
"""

from dataclasses import dataclass, field
from functools import cached_property, lru_cache

import numpy as np

from .errors import SingularPriorError

# Above this kernel size apply_blur switches from shifted sums to FFTs.
FFT_MIN_TAPS = 49


def _readonly(a):
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


@lru_cache(maxsize=None)
def kernel_offsets(side):
    """Row-major list of ``(dy, dx)`` offsets for a ``side x side`` kernel."""
    if side < 1 or side % 2 == 0:
        raise ValueError(f"kernel side must be odd and >= 1, got {side}")
    c = (side - 1) // 2
    rng = np.arange(side) - c
    dy, dx = np.meshgrid(rng, rng, indexing="ij")
    out = np.stack([dy.ravel(), dx.ravel()], axis=1)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class KernelModel:
    """Affine kernel model ``h = T z + t``.

    Attributes:
        side: odd kernel side, ``M = side**2``.
        T: ``(M, P)`` matrix of full column rank.
        t: ``(M,)`` offset vector.
    """

    side: int
    T: np.ndarray
    t: np.ndarray
    constraints: tuple = field(default=(), compare=False)

    def __post_init__(self):
        M = self.side * self.side
        T = _readonly(self.T).reshape(M, -1)
        t = _readonly(self.t).reshape(M)
        if T.shape[1] > M:
            raise ValueError("T has more columns than kernel entries")
        if T.shape[1] and np.linalg.matrix_rank(T) < T.shape[1]:
            raise ValueError("T must have full column rank")
        object.__setattr__(self, "T", T)
        object.__setattr__(self, "t", t)
        kernel_offsets(self.side)

    @property
    def M(self):
        return self.side * self.side

    @property
    def P(self):
        return self.T.shape[1]

    @property
    def offsets(self):
        return kernel_offsets(self.side)

    @cached_property
    def T_ext(self):
        """``[t, T]``, shape ``(M, P + 1)``."""
        return _readonly(np.column_stack([self.t, self.T]))

    @cached_property
    def gram(self):
        """``T^T T``."""
        return _readonly(self.T.T @ self.T)

    @cached_property
    def gram_ext(self):
        """``[t, T]^T [t, T]``, used by the shift-trace identity."""
        return _readonly(self.T_ext.T @ self.T_ext)

    @cached_property
    def left_inverse(self):
        """``(T^T T)^{-1} T^T``."""
        if self.P == 0:
            return _readonly(np.zeros((0, self.M)))
        return _readonly(np.linalg.solve(self.gram, self.T.T))


def build_symmetric_constraint(side):
    """Sum-to-one plus symmetry across the main diagonal.

    Free coordinates are the entries on or above the diagonal; the center
    entry is eliminated through the sum-to-one constraint, so ``t`` is the
    centered delta and ``P = side*(side+1)/2 - 1``. Diagonal columns read
    ``e_aa - e_cc`` and off-diagonal columns ``e_ab + e_ba - 2 e_cc``.
    """
    if not isinstance(side, (int, np.integer)) or side < 1 or side % 2 == 0:
        raise ValueError(f"kernel side must be an odd positive integer, got {side!r}")
    side = int(side)
    M = side * side
    c = (side - 1) // 2
    center = c * side + c
    cols = []
    for a in range(side):
        for b in range(a, side):
            if a == b == c:
                continue
            col = np.zeros(M)
            if a == b:
                col[a * side + a] = 1.0
                col[center] -= 1.0
            else:
                col[a * side + b] = 1.0
                col[b * side + a] = 1.0
                col[center] -= 2.0
            cols.append(col)
    T = np.array(cols).T if cols else np.zeros((M, 0))
    t = np.zeros(M)
    t[center] = 1.0
    return KernelModel(side, T, t, constraints=("sum-to-one", "diagonal-symmetry"))


def kernel_from_z(model, z):
    z = np.asarray(z, dtype=float)
    if z.shape != (model.P,):
        raise ValueError(f"z must have length {model.P}, got shape {z.shape}")
    return model.T @ z + model.t


def z_from_kernel(model, h):
    """Least-squares coordinates of ``h`` in the constraint subspace."""
    h = np.asarray(h, dtype=float).ravel()
    if h.shape != (model.M,):
        raise ValueError(f"kernel must have {model.M} entries, got {h.size}")
    return model.left_inverse @ (h - model.t)


def constraint_violation(model, h):
    """Max deviation of ``h`` from sum-to-one and diagonal symmetry."""
    k = np.asarray(h, dtype=float).reshape(model.side, model.side)
    return max(abs(k.sum() - 1.0), float(np.max(np.abs(k - k.T))))


# ---------------------------------------------------------------------------
# circular convolution


def embed_kernel(kernel, shape):
    """Place a centered odd kernel on a periodic grid (origin at ``[0, 0]``).

    Kernels larger than the grid wrap around and overlapping taps add up.
    """
    kernel = np.asarray(kernel, dtype=float)
    kh, kw = kernel.shape
    dy = np.arange(kh) - (kh - 1) // 2
    dx = np.arange(kw) - (kw - 1) // 2
    out = np.zeros(shape)
    np.add.at(out, (dy[:, None] % shape[0], dx[None, :] % shape[1]), kernel)
    return out


def circular_convolve(x, kernel, method="auto"):
    """``out[i] = sum_o k(o) x[i - o]`` with periodic boundary."""
    x = np.asarray(x, dtype=float)
    kernel = np.asarray(kernel, dtype=float)
    if method == "auto":
        method = "fft" if kernel.size > FFT_MIN_TAPS else "direct"
    if method == "fft":
        K = np.fft.rfft2(embed_kernel(kernel, x.shape))
        return np.fft.irfft2(np.fft.rfft2(x) * K, s=x.shape)
    if method != "direct":
        raise ValueError(f"unknown method {method!r}")
    kh, kw = kernel.shape
    cy, cx = (kh - 1) // 2, (kw - 1) // 2
    out = np.zeros_like(x)
    for a in range(kh):
        for b in range(kw):
            w = kernel[a, b]
            if w != 0.0:
                out += w * np.roll(x, (a - cy, b - cx), axis=(0, 1))
    return out


def circular_correlate(r, kernel, method="auto"):
    """Adjoint of :func:`circular_convolve`: ``out[i] = sum_o k(o) r[i + o]``."""
    return circular_convolve(r, np.asarray(kernel, dtype=float)[::-1, ::-1], method)


def circular_xcorr(u, v):
    """``c[d] = sum_i u[i] v[i - d]`` for every periodic lag ``d``."""
    return np.fft.irfft2(np.fft.rfft2(u) * np.conj(np.fft.rfft2(v)), s=u.shape)


@dataclass(frozen=True)
class BlurOperator:
    """The blur ``H(z) = sum_p z_p K_p + K_0`` for a fixed ``z``."""

    model: KernelModel
    z: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "z", _readonly(self.z))
        if self.z.shape != (self.model.P,):
            raise ValueError(f"z must have length {self.model.P}")

    @cached_property
    def kernel(self):
        return kernel_from_z(self.model, self.z).reshape(self.model.side, self.model.side)


def _check_image(x, side):
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise ValueError(f"expected a 2D image, got shape {x.shape}")
    if min(x.shape) < side:
        raise ValueError(f"image {x.shape} is smaller than the {side}x{side} kernel")
    return x


def apply_blur(op, x):
    x = _check_image(x, op.model.side)
    return circular_convolve(x, op.kernel)


def apply_blur_adjoint(op, r):
    r = _check_image(r, op.model.side)
    return circular_correlate(r, op.kernel)


def shift_stack(model, x):
    """All shifted copies ``S_m x`` stacked along axis 0, shape ``(M, H, W)``."""
    return np.stack([np.roll(x, tuple(o), axis=(0, 1)) for o in model.offsets])


def shift_stack_adjoint(model, g):
    """``sum_m S_m^T g_m`` for a stack ``g`` of shape ``(M, H, W)``."""
    out = np.zeros(g.shape[1:])
    for o, gm in zip(model.offsets, g):
        out += np.roll(gm, (-o[0], -o[1]), axis=(0, 1))
    return out


def apply_Kp(model, p, x):
    """``K_p x``; ``p = 0`` applies ``K_0`` (weights ``t``)."""
    if not 0 <= p <= model.P:
        raise IndexError(f"p must lie in 0..{model.P}, got {p}")
    x = np.asarray(x, dtype=float)
    col = model.T_ext[:, p]
    out = np.zeros_like(x)
    for m in np.flatnonzero(col):
        out += col[m] * np.roll(x, tuple(model.offsets[m]), axis=(0, 1))
    return out


def apply_all_Kp(model, x):
    """``[K_0 x, K_1 x, ..., K_P x]``, shape ``(P + 1, H, W)``."""
    S = shift_stack(model, x)
    return np.tensordot(model.T_ext.T, S, axes=1)


def apply_all_Kp_adjoint(model, g):
    """``sum_p K_p^T g_p`` for a stack of shape ``(P + 1, H, W)``."""
    return shift_stack_adjoint(model, np.tensordot(model.T_ext, g, axes=1))


# ---------------------------------------------------------------------------
# lag kernels: sum_{m,m'} W[m, m'] S_m^T S_m' is a convolution


@lru_cache(maxsize=None)
def _lag_index(side):
    off = kernel_offsets(side)
    d = off[None, :, :] - off[:, None, :] + (side - 1)
    idx = d[..., 0] * (2 * side - 1) + d[..., 1]
    idx.flags.writeable = False
    return idx


def lag_kernel(W, side):
    """Collapse an ``(M, M)`` weight matrix into a ``(2s-1, 2s-1)`` kernel.

    ``g[d] = sum over (m, m') with offset_m' - offset_m = d of W[m, m']``.
    """
    L = 2 * side - 1
    g = np.bincount(_lag_index(side).ravel(), weights=np.asarray(W).ravel(), minlength=L * L)
    return g.reshape(L, L)


def lag_kernel_adjoint(gbar, side):
    """Adjoint of :func:`lag_kernel`."""
    return np.asarray(gbar).ravel()[_lag_index(side)]


def wrapped_lag_index(side, shape):
    """Flat positions on the periodic grid of every lag in the lag window."""
    d = np.arange(2 * side - 1) - (side - 1)
    return ((d[:, None] % shape[0]) * shape[1] + d[None, :] % shape[1])


# ---------------------------------------------------------------------------
# image difference operator (isotropic TV, circular wrap)


def apply_D(x):
    """Forward differences ``[grad_h x, grad_v x]``, shape ``(2, H, W)``.

    Block ``j`` of ``D`` is the pair ``(out[0].flat[j], out[1].flat[j])``.
    """
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        raise ValueError("empty image")
    return np.stack([np.roll(x, -1, axis=1) - x, np.roll(x, -1, axis=0) - x])


def apply_D_adjoint(g):
    g = np.asarray(g, dtype=float)
    return (np.roll(g[0], 1, axis=1) - g[0]) + (np.roll(g[1], 1, axis=0) - g[1])


def D_weighted_diag(w):
    """Diagonal of ``D^T Diag(w (x) 1_2) D`` for per-block weights ``w``."""
    return 2.0 * w + np.roll(w, 1, axis=1) + np.roll(w, 1, axis=0)


def D_trace(delta):
    """``trace(D_j^T D_j Diag(delta))`` for every block ``j``."""
    return 2.0 * delta + np.roll(delta, -1, axis=1) + np.roll(delta, -1, axis=0)


# ---------------------------------------------------------------------------
# priors


@dataclass(frozen=True)
class PriorSpec:
    """Image prior (kappa, TV differences) and SAR kernel prior.

    ``L`` and ``mu`` define the induced Gaussian prior on ``z`` with
    precision ``xi * L`` and mean ``mu``.
    """

    kappa: float
    A: np.ndarray
    m: np.ndarray
    L: np.ndarray
    mu: np.ndarray
    alpha: float = 0.0
    eta: float = 0.0
    stencil: str = "isotropic-tv"

    def __post_init__(self):
        if not 0.0 < self.kappa <= 1.0:
            raise ValueError(f"kappa must lie in (0, 1], got {self.kappa}")
        if self.alpha < 0 or self.eta < 0:
            raise ValueError("alpha and eta must be nonnegative")
        for name in ("A", "m", "L", "mu"):
            object.__setattr__(self, name, _readonly(getattr(self, name)))

    @cached_property
    def L_mu(self):
        return _readonly(self.L @ self.mu)


def sar_difference_matrix(side):
    """Averaging row followed by horizontal and vertical forward differences.

    Differences use a replicate boundary on the kernel grid, so the last
    column (row) of each difference block is zero. Shape ``(2M + 1, M)``.
    """
    M = side * side
    A = np.zeros((2 * M + 1, M))
    A[0] = 1.0 / M
    for a in range(side):
        for b in range(side):
            m = a * side + b
            if b + 1 < side:
                A[1 + m, m] = -1.0
                A[1 + m, m + 1] = 1.0
            if a + 1 < side:
                A[1 + M + m, m] = -1.0
                A[1 + M + m, m + side] = 1.0
    return A


def build_sar_prior(model, A=None, m=None, kappa=0.5, alpha=0.0, eta=0.0):
    """Derive the z-space prior ``(L, mu)`` from the SAR kernel prior.

    ``L = T^T T (T^T (A^T A)^{-1} T)^{-1} T^T T`` and
    ``mu = (T^T T)^{-1} T^T (m - t)``. Defaults follow the usual choice of a
    mean-plus-differences ``A`` and a flat mean ``m = 1/M``.
    """
    M = model.M
    A = sar_difference_matrix(model.side) if A is None else np.asarray(A, dtype=float)
    m = np.full(M, 1.0 / M) if m is None else np.asarray(m, dtype=float).ravel()
    if A.ndim != 2 or A.shape[1] != M:
        raise ValueError(f"A must have {M} columns")
    if np.linalg.matrix_rank(A) < M:
        raise SingularPriorError("A must have full column rank")
    AtA_inv = np.linalg.inv(A.T @ A)
    G = model.gram
    inner = model.T.T @ AtA_inv @ model.T
    L = G @ np.linalg.solve(inner, G) if model.P else np.zeros((0, 0))
    L = 0.5 * (L + L.T)
    mu = z_from_kernel(model, m)
    return PriorSpec(kappa=kappa, A=A, m=m, L=L, mu=mu, alpha=alpha, eta=eta)
