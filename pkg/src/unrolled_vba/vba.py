"""Mean-field variational Bayesian blind deconvolution.

One sweep updates, in order, the Gaussian image factor (truncated CG for the
mean, inverse precision diagonal for the covariance), the Gaussian kernel
factor in z-coordinates, the majorant auxiliary variables ``lambda`` and the
Gamma factor of the image-prior weight ``gamma``.
"""

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import linalg
from scipy.special import digamma, gammaln

from .errors import NumericalFailure, SingularPosteriorError
from .operators import (
    KernelModel,
    PriorSpec,
    D_trace,
    D_weighted_diag,
    apply_D,
    apply_D_adjoint,
    apply_all_Kp,
    circular_convolve,
    circular_correlate,
    embed_kernel,
    kernel_from_z,
    lag_kernel,
    z_from_kernel,
)


@dataclass(frozen=True)
class GaussianImageFactor:
    mean: np.ndarray
    cov_diag: np.ndarray


@dataclass(frozen=True)
class GaussianKernelFactor:
    mean: np.ndarray
    cov: np.ndarray

    def kernel_cov(self, model):
        """Covariance of ``h = T z + t``, i.e. ``T C_z T^T``."""
        return model.T @ self.cov @ model.T.T


@dataclass(frozen=True)
class GammaFactor:
    shape: float
    rate: float

    @property
    def mean(self):
        return self.shape / self.rate


@dataclass(frozen=True)
class VbaState:
    image: GaussianImageFactor
    kernel: GaussianKernelFactor
    lam: np.ndarray
    gamma: GammaFactor
    iteration: int = 0


@dataclass(frozen=True)
class VbaConfig:
    """Hyperparameters and numerical settings of one VBA solve.

    ``beta`` is the inverse noise variance. ``convergence_tol`` optionally
    stops :func:`vba_run` once the relative squared change of the image mean
    drops below it; ``None`` runs exactly ``max_iterations`` sweeps.
    ``init_lambda_cov`` adds the unit initial image covariance to the trace
    term of the initial ``lambda``; by default ``lambda`` starts from the
    squared differences of ``y`` alone.
    """

    model: KernelModel
    prior: PriorSpec
    xi: float = 1.0
    beta: float = 1e4
    cg_iterations: int = 10
    cg_tolerance: float = 1e-6
    max_iterations: int = 10
    cz_init_scale: float = 1e-4
    init_kernel_width: int = 5
    lambda_floor: float = 1e-10
    precision_route: str = "lag"
    convergence_tol: Optional[float] = None
    init_lambda_cov: bool = False

    def __post_init__(self):
        if not (self.xi > 0 and self.beta > 0):
            raise ValueError(f"xi and beta must be positive (xi={self.xi}, beta={self.beta})")
        if self.cg_iterations < 1:
            raise ValueError("cg_iterations must be >= 1")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")
        if self.precision_route not in ("lag", "eig"):
            raise ValueError(f"unknown precision_route {self.precision_route!r}")


# ---------------------------------------------------------------------------
# image factor


def majorant_weights(lam, kappa):
    """Diagonal of the block majorant ``Lambda``: ``kappa * lam_j**(kappa - 1)``.

    One weight per block ``j``; it applies to both difference components.
    """
    lam = np.asarray(lam, dtype=float)
    if np.any(~(lam > 0)):
        raise ValueError("lambda must be strictly positive")
    return kappa * lam ** (kappa - 1.0)


class ImagePrecision:
    """Operator form of the image-factor precision matrix.

        beta * (H^T H + sum_pq C_z[p, q] K_p^T K_q) + 2 gamma D^T Lambda D

    The two blur terms collapse into a single convolution whose kernel is
    the lag sum of ``h h^T + T C_z T^T`` (route ``"lag"``). Route ``"eig"``
    instead expands ``C_z`` into its eigenpairs and applies one
    convolution/correlation pair per component.
    """

    def __init__(self, state, config):
        model = config.model
        self.shape = state.image.mean.shape
        self.beta = float(config.beta)
        self.gamma = float(state.gamma.mean)
        self.kappa = config.prior.kappa
        self.route = config.precision_route
        self.model = model
        self.lam = np.asarray(state.lam, dtype=float)
        self.w = majorant_weights(self.lam, self.kappa)
        self.h = kernel_from_z(model, state.kernel.mean)
        self.cz = state.kernel.cov
        W = np.outer(self.h, self.h) + model.T @ self.cz @ model.T.T
        self.g = lag_kernel(W, model.side)
        self.g_emb = embed_kernel(self.g, self.shape)
        self._g_hat = np.fft.rfft2(self.g_emb)
        if self.route == "eig":
            s, U = np.linalg.eigh(self.cz)
            side = model.side
            self._eig = [(sr, (model.T @ U[:, r]).reshape(side, side)) for r, sr in enumerate(s)]

    def blur_gram(self, v):
        """``(H^T H + sum_pq C_z[p, q] K_p^T K_q) v``."""
        if self.route == "lag":
            return np.fft.irfft2(np.fft.rfft2(v) * self._g_hat, s=self.shape)
        side = self.model.side
        k = self.h.reshape(side, side)
        out = circular_correlate(circular_convolve(v, k), k)
        for sr, kr in self._eig:
            out += sr * circular_correlate(circular_convolve(v, kr), kr)
        return out

    def prior_term(self, v):
        return apply_D_adjoint(self.w * apply_D(v))

    def __call__(self, v):
        return self.beta * self.blur_gram(v) + 2.0 * self.gamma * self.prior_term(v)

    def diagonal(self):
        # Lags congruent to 0 on the periodic grid all land on entry [0, 0].
        return self.beta * self.g_emb[0, 0] + 2.0 * self.gamma * D_weighted_diag(self.w)


def apply_image_precision(state, config, v):
    return ImagePrecision(state, config)(np.asarray(v, dtype=float))


def precision_diag(state, config, precision=None):
    """Inverse of the precision diagonal, used as the diagonal covariance."""
    prec = precision or ImagePrecision(state, config)
    d = prec.diagonal()
    if not np.all(np.isfinite(d)) or np.any(d <= 0):
        raise NumericalFailure("image precision diagonal is not strictly positive")
    return 1.0 / d


@dataclass
class CGResult:
    x: np.ndarray
    iterations: int
    residual_norm: float
    relative_residual: float
    trace: Optional[dict] = None


def cg_solve(apply_A, b, x0=None, iters=10, tol=1e-6, record=False):
    """Linear conjugate gradient for a symmetric positive definite operator.

    Stops after ``iters`` iterations or once ``||r|| <= tol * ||b||``. With
    ``record=True`` the search directions, residuals and step sizes are kept
    in ``trace`` so the solve can be differentiated exactly.
    """
    b = np.asarray(b, dtype=float)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    r = b - apply_A(x)
    rho = float(np.vdot(r, r))
    bnorm = float(np.linalg.norm(b))
    scale = bnorm if bnorm > 0 else 1.0
    tr = None
    if record:
        tr = dict(x0=x.copy(), r0=r.copy(), p=[], q=[], r=[], rho=[rho], alpha=[], pq=[],
                  beta=[], has_next=[])
    if not np.isfinite(rho):
        raise NumericalFailure("non-finite residual in CG")
    n = 0
    p = r.copy()
    if np.sqrt(rho) > tol * scale:
        for i in range(iters):
            q = apply_A(p)
            pq = float(np.vdot(p, q))
            if not np.isfinite(pq) or pq <= 0:
                raise NumericalFailure("CG operator is not positive definite")
            alpha = rho / pq
            x = x + alpha * p
            r = r - alpha * q
            rho_new = float(np.vdot(r, r))
            if not np.isfinite(rho_new):
                raise NumericalFailure("non-finite residual in CG")
            n += 1
            last = np.sqrt(rho_new) <= tol * scale or i == iters - 1
            if record:
                tr["p"].append(p)
                tr["q"].append(q)
                tr["r"].append(r)
                tr["rho"].append(rho_new)
                tr["alpha"].append(alpha)
                tr["pq"].append(pq)
                tr["has_next"].append(not last)
            if last:
                rho = rho_new
                break
            beta = rho_new / rho
            if record:
                tr["beta"].append(beta)
            p = r + beta * p
            rho = rho_new
    res = float(np.sqrt(rho))
    return CGResult(x=x, iterations=n, residual_norm=res, relative_residual=res / scale, trace=tr)


@dataclass
class SweepTape:
    """Intermediate quantities of one sweep, kept for differentiation."""

    state_in: VbaState
    config: VbaConfig
    y: np.ndarray
    precision: ImagePrecision = None
    HTy: np.ndarray = None
    cg: CGResult = None
    image: GaussianImageFactor = None
    U: np.ndarray = None
    B_full: np.ndarray = None
    a: np.ndarray = None
    r_z: np.ndarray = None
    kernel: GaussianKernelFactor = None
    e_lam: np.ndarray = None
    lam: np.ndarray = None
    gamma: GammaFactor = None
    extra: dict = field(default_factory=dict)


def update_image(state, config, y, tape=None):
    """New image factor: CG mean warm-started at the current mean, diagonal covariance."""
    y = np.asarray(y, dtype=float)
    prec = ImagePrecision(state, config)
    side = config.model.side
    HTy = circular_correlate(y, prec.h.reshape(side, side))
    rhs = config.beta * HTy
    cg = cg_solve(prec, rhs, x0=state.image.mean, iters=config.cg_iterations,
                  tol=config.cg_tolerance, record=tape is not None)
    delta = precision_diag(state, config, prec)
    factor = GaussianImageFactor(mean=cg.x, cov_diag=delta)
    if tape is not None:
        tape.precision, tape.HTy, tape.cg, tape.image = prec, HTy, cg, factor
    return factor, cg


# ---------------------------------------------------------------------------
# kernel factor


def _kernel_stats(image, model, y):
    U = apply_all_Kp(model, image.mean)
    Uf = U.reshape(U.shape[0], -1)
    B_full = Uf @ Uf.T + model.gram_ext * float(np.sum(image.cov_diag))
    a = Uf[1:] @ np.asarray(y, dtype=float).ravel() - B_full[1:, 0]
    return a, B_full, U


def compute_kernel_stats(image, model, y):
    """First and second moments entering the kernel update.

    ``B[p, q] = trace(K_p C_x K_q^T) + x^T K_p^T K_q x`` and
    ``a[p] = x^T K_p^T y - B[p, 0]`` for ``p, q = 1..P``. The trace term is
    ``(T^T T)[p, q] * sum(cov_diag)`` because distinct circular shifts of a
    diagonal matrix have disjoint diagonals.
    """
    a, B_full, _ = _kernel_stats(image, model, y)
    return a, B_full[1:, 1:]


def update_kernel_posterior(a, B, config, tape=None):
    """Gaussian kernel factor with precision ``beta B + xi L``."""
    prior = config.prior
    Pi = config.beta * np.asarray(B) + config.xi * prior.L
    Pi = 0.5 * (Pi + Pi.T)
    r = config.beta * np.asarray(a) + config.xi * prior.L_mu
    P = Pi.shape[0]
    if P == 0:
        factor = GaussianKernelFactor(mean=np.zeros(0), cov=np.zeros((0, 0)))
    else:
        try:
            cho = linalg.cho_factor(Pi, lower=True, check_finite=True)
        except (linalg.LinAlgError, ValueError) as exc:
            raise SingularPosteriorError(
                f"kernel posterior precision is not positive definite "
                f"(xi={config.xi:g}, beta={config.beta:g})") from exc
        cov = linalg.cho_solve(cho, np.eye(P))
        cov = 0.5 * (cov + cov.T)
        factor = GaussianKernelFactor(mean=linalg.cho_solve(cho, r), cov=cov)
    if tape is not None:
        tape.r_z, tape.kernel = r, factor
    return factor


# ---------------------------------------------------------------------------
# auxiliary variables and gamma


def expected_sq_differences(image):
    """``E ||D_j x||^2`` under the diagonal Gaussian image factor."""
    Dx = apply_D(image.mean)
    return Dx[0] ** 2 + Dx[1] ** 2 + D_trace(image.cov_diag)


def update_lambda(image, prior=None, floor=1e-10, tape=None):
    e = expected_sq_differences(image)
    lam = np.maximum(e, floor)
    if tape is not None:
        tape.e_lam, tape.lam = e, lam
    return lam


def update_gamma(lam, prior):
    lam = np.asarray(lam, dtype=float)
    if np.any(~(lam > 0)):
        raise ValueError("lambda must be strictly positive")
    d = lam.size / (2.0 * prior.kappa) + prior.alpha
    b = float(np.sum(lam ** prior.kappa)) + prior.eta
    return GammaFactor(shape=d, rate=b)


# ---------------------------------------------------------------------------
# objective


def surrogate_objective(state, config, y):
    """``KL(q || F)`` up to an additive constant, in closed form.

    Combines the expected negative log of the majorized posterior with the
    negative entropies of the image, kernel and gamma factors.
    """
    y = np.asarray(y, dtype=float)
    model, prior = config.model, config.prior
    kappa, beta, xi = prior.kappa, config.beta, config.xi
    x, delta = state.image.mean, state.image.cov_diag
    z, C = state.kernel.mean, state.kernel.cov
    N, P = x.size, model.P
    d, b = state.gamma.shape, state.gamma.rate
    E_gamma = d / b
    E_log_gamma = digamma(d) - np.log(b)

    _, B_full, _ = _kernel_stats(state.image, model, y)
    h = kernel_from_z(model, z)
    resid = y - circular_convolve(x, h.reshape(model.side, model.side), method="fft")
    data = 0.5 * beta * (np.sum(resid ** 2) + np.dot(h, h) * np.sum(delta)
                         + np.sum(C * B_full[1:, 1:]))
    data -= 0.5 * N * np.log(beta)

    lam = state.lam
    E = expected_sq_differences(state.image)
    prior_x = E_gamma * np.sum((kappa * E + (1.0 - kappa) * lam) / lam ** (1.0 - kappa))
    gamma_terms = -(N / (2.0 * kappa) + prior.alpha - 1.0) * E_log_gamma + prior.eta * E_gamma
    dz = z - prior.mu
    prior_z = 0.5 * xi * (dz @ prior.L @ dz + np.sum(prior.L * C)) - 0.5 * P * np.log(xi)

    log2pie = 1.0 + np.log(2.0 * np.pi)
    ent_x = 0.5 * np.sum(np.log(delta)) + 0.5 * N * log2pie
    ent_z = (0.5 * np.linalg.slogdet(C)[1] if P else 0.0) + 0.5 * P * log2pie
    ent_g = d - np.log(b) + gammaln(d) + (1.0 - d) * digamma(d)
    return float(data + prior_x + gamma_terms + prior_z - ent_x - ent_z - ent_g)


# ---------------------------------------------------------------------------
# full algorithm


def initial_kernel(side, width):
    width = min(width, side)
    if width % 2 == 0:
        raise ValueError("initial kernel width must be odd")
    k = np.zeros((side, side))
    lo = (side - width) // 2
    k[lo:lo + width, lo:lo + width] = 1.0 / (width * width)
    return k.ravel()


def initial_state(y, config):
    """Image mean ``y`` with unit covariance, uniform initial kernel and
    ``lambda``/``gamma`` computed from the initial image factor."""
    y = np.asarray(y, dtype=float)
    model = config.model
    image = GaussianImageFactor(mean=y.copy(), cov_diag=np.ones_like(y))
    z0 = z_from_kernel(model, initial_kernel(model.side, config.init_kernel_width))
    kernel = GaussianKernelFactor(mean=z0, cov=config.cz_init_scale * np.eye(model.P))
    lam_src = image if config.init_lambda_cov else replace(image, cov_diag=np.zeros_like(y))
    lam = update_lambda(lam_src, config.prior, config.lambda_floor)
    return VbaState(image=image, kernel=kernel, lam=lam, gamma=update_gamma(lam, config.prior))


def vba_sweep(state, config, y, tape=None):
    """One pass of the four updates. Returns ``(new_state, cg_result)``."""
    image, cg = update_image(state, config, y, tape)
    a, B_full, U = _kernel_stats(image, config.model, y)
    if tape is not None:
        tape.U, tape.B_full, tape.a = U, B_full, a
    kernel = update_kernel_posterior(a, B_full[1:, 1:], config, tape)
    lam = update_lambda(image, config.prior, config.lambda_floor, tape)
    gamma = update_gamma(lam, config.prior)
    if tape is not None:
        tape.gamma = gamma
    new = VbaState(image=image, kernel=kernel, lam=lam, gamma=gamma,
                   iteration=state.iteration + 1)
    return new, cg


def vba_run(y, config, trace=None, state=None):
    """Run the algorithm from the standard initialization.

    If ``trace`` is a list, one dict per sweep is appended with keys
    ``iteration, surrogate_objective, gamma, cg_residual, kernel_change_l2``.
    """
    y = np.asarray(y, dtype=float)
    state = initial_state(y, config) if state is None else state
    model = config.model
    for _ in range(config.max_iterations):
        new, cg = vba_sweep(state, config, y)
        if trace is not None:
            dh = kernel_from_z(model, new.kernel.mean) - kernel_from_z(model, state.kernel.mean)
            trace.append(dict(iteration=new.iteration,
                              surrogate_objective=surrogate_objective(new, config, y),
                              gamma=new.gamma.mean, cg_residual=cg.relative_residual,
                              kernel_change_l2=float(np.linalg.norm(dh))))
        converged = False
        if config.convergence_tol is not None:
            xo = state.image.mean
            change = np.sum((new.image.mean - xo) ** 2) / max(np.sum(xo ** 2), 1e-300)
            converged = change < config.convergence_tol
        state = new
        if converged:
            break
    return state


def with_hyperparameters(config, xi=None, beta=None):
    return replace(config, xi=config.xi if xi is None else float(xi),
                   beta=config.beta if beta is None else float(beta))


def make_config(side=9, xi=1.0, sigma=0.01, kappa=0.5, alpha=0.0, eta=0.0, **kwargs):
    """Convenience constructor with the symmetric constraint and SAR prior."""
    from .operators import build_sar_prior, build_symmetric_constraint

    model = build_symmetric_constraint(side)
    prior = build_sar_prior(model, kappa=kappa, alpha=alpha, eta=eta)
    return VbaConfig(model=model, prior=prior, xi=xi, beta=sigma ** -2.0, **kwargs)
