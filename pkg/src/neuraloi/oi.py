"""Exact optimal interpolation and its stationary convolutional square root."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .observation import ObsSet
from .sparse import SparseSym, cholesky

log = logging.getLogger(__name__)

SPECTRUM_FLOOR = 1e-12


class NotACovarianceError(ValueError):
    """Spectrum has significantly negative values."""


@dataclass(frozen=True, eq=False)
class OIProblem:
    """Observations plus a Gaussian prior given by a precision or a dense covariance."""

    obs: ObsSet
    precision: SparseSym | None = None
    covariance: np.ndarray | None = None
    mean: np.ndarray | None = None

    def __post_init__(self):
        n = self.obs.mask.size
        if self.precision is None and self.covariance is None:
            raise ValueError("OIProblem needs a precision or a covariance")
        if self.precision is not None and self.precision.n != n:
            raise ValueError(f"precision has dimension {self.precision.n}, grid has {n}")
        if self.covariance is not None and np.shape(self.covariance) != (n, n):
            raise ValueError(f"covariance must be {n}x{n}")
        if self.mean is not None and np.shape(self.mean) != self.obs.shape:
            raise ValueError("mean must have the observation grid shape")

    @property
    def shape(self) -> tuple:
        return self.obs.shape

    @property
    def mu(self) -> np.ndarray:
        return np.zeros(self.obs.shape) if self.mean is None else np.asarray(self.mean, float)

    def precision_matrix(self) -> sp.csr_matrix:
        if self.precision is not None:
            return self.precision.matrix
        return sp.csr_matrix(np.linalg.inv(self.covariance))

    def covariance_matrix(self) -> np.ndarray:
        if self.covariance is not None:
            return np.asarray(self.covariance, dtype=np.float64)
        if self.precision.n > 4000:
            raise ValueError("dense covariance requested for a large problem")
        return np.linalg.inv(self.precision.to_dense())


def _check_state(x, prob: OIProblem) -> np.ndarray:
    x = np.asarray(getattr(x, "values", x), dtype=np.float64)
    if x.shape != prob.shape:
        raise ValueError(f"state {x.shape} does not match problem grid {prob.shape}")
    return x


def oi_cost(x, prob: OIProblem) -> float:
    """``||y - H x||^2 / sigma2 + (x - mu)^T Q (x - mu)``."""
    x = _check_state(x, prob)
    obs = prob.obs
    r = (obs.values - x)[obs.mask]
    d = (x - prob.mu).ravel()
    if prob.precision is not None:
        prior = prob.precision.quad_form(d)
    else:
        prior = float(d @ sla.solve(prob.covariance, d, assume_a="pos"))
    data = float(r @ r) / obs.sigma2 if r.size else 0.0
    return data + prior


def oi_gradient(x, prob: OIProblem) -> np.ndarray:
    x = _check_state(x, prob)
    obs = prob.obs
    resid = np.where(obs.mask, x - obs.values, 0.0)
    d = (x - prob.mu).ravel()
    prior = prob.precision_matrix() @ d
    return 2.0 * resid / obs.sigma2 + 2.0 * prior.reshape(prob.shape)


def posterior_precision(prob: OIProblem) -> SparseSym:
    """``H^T R^{-1} H + Q``."""
    obs = prob.obs
    if obs.sigma2 <= 0:
        raise ValueError("sigma2 must be positive for the precision form")
    hh = sp.diags(obs.mask.ravel().astype(np.float64) / obs.sigma2)
    return SparseSym.from_scipy(hh + prob.precision_matrix(), check=False)


def solve_precision(prob: OIProblem) -> np.ndarray:
    """``mu + (H^T R^{-1} H + Q)^{-1} H^T R^{-1} (y - H mu)`` via sparse Cholesky."""
    obs = prob.obs
    mu = prob.mu
    if obs.n_obs == 0:
        return mu.copy()
    if obs.sigma2 <= 0:
        raise ValueError("sigma2 must be positive for the precision form")
    rhs = np.where(obs.mask, obs.values - mu, 0.0) / obs.sigma2
    a = posterior_precision(prob)
    dx = cholesky(a).solve(rhs.ravel())
    return mu + dx.reshape(prob.shape)


def solve_covariance(prob: OIProblem) -> np.ndarray:
    """Kalman-gain form ``mu + P H^T (H P H^T + R)^{-1} (y - H mu)`` (dense)."""
    obs = prob.obs
    mu = prob.mu
    if obs.n_obs == 0:
        return mu.copy()
    n = obs.mask.size
    if n > 2000 and prob.covariance is None:
        raise ValueError(f"dense Kalman gain limited to 2000 unknowns, got {n}")
    p = prob.covariance_matrix()
    idx = np.flatnonzero(obs.mask.ravel())
    hph = p[np.ix_(idx, idx)] + obs.sigma2 * np.eye(idx.size)
    innov = (obs.values - mu)[obs.mask]
    try:
        w = sla.solve(hph, innov, assume_a="pos")
    except (np.linalg.LinAlgError, sla.LinAlgError) as exc:
        raise np.linalg.LinAlgError(f"innovation covariance is singular: {exc}") from None
    return mu + (p[:, idx] @ w).reshape(prob.shape)


@dataclass
class GDTrace:
    cost: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)

    @property
    def final_grad_norm(self) -> float:
        return self.grad_norm[-1] if self.grad_norm else float("nan")


def hessian_norm(prob: OIProblem, iters: int = 100, seed: int = 0) -> float:
    """Power-iteration estimate of the largest eigenvalue of the OI Hessian."""
    q = prob.precision_matrix()
    w = prob.obs.mask.ravel() / prob.obs.sigma2
    v = np.random.default_rng(seed).standard_normal(q.shape[0])
    lam = 0.0
    for _ in range(iters):
        v /= np.linalg.norm(v)
        hv = 2.0 * (w * v + q @ v)
        lam = float(v @ hv)
        v = hv
    return lam


def gradient_descent_oi(
    prob: OIProblem,
    step: float | Callable[[int], float] | None = None,
    max_iters: int = 5000,
    rtol: float = 0.0,
    x0=None,
) -> tuple:
    """Plain gradient descent on the OI cost.

    ``step`` is a constant, a function of the 1-based iteration index, or None
    for ``1 / L`` with ``L`` the Hessian's largest eigenvalue.  Stops early once
    the gradient norm falls below ``rtol`` times its initial value.
    """
    if step is None:
        fixed = 1.0 / (1.01 * hessian_norm(prob))
        step_fn = lambda k: fixed  # noqa: E731
    elif callable(step):
        step_fn = step
    else:
        step_fn = lambda k: float(step)  # noqa: E731
    x = prob.mu.copy() if x0 is None else _check_state(x0, prob).copy()
    trace = GDTrace()
    g = oi_gradient(x, prob)
    g0 = np.linalg.norm(g)
    for k in range(1, max_iters + 1):
        trace.cost.append(oi_cost(x, prob))
        trace.grad_norm.append(float(np.linalg.norm(g)))
        if trace.grad_norm[-1] <= rtol * g0:
            break
        x = x - step_fn(k) * g
        g = oi_gradient(x, prob)
    else:
        trace.cost.append(oi_cost(x, prob))
        trace.grad_norm.append(float(np.linalg.norm(g)))
    return x, trace


# ---------------------------------------------------------------------------
# stationary square-root kernels


def _floor(spectrum: np.ndarray, floor: float) -> np.ndarray:
    scale = max(float(np.max(np.abs(spectrum))), 1.0)
    if np.min(spectrum) < -1e-8 * scale:
        raise NotACovarianceError(f"spectrum has negative value {np.min(spectrum):.3e}")
    if np.min(spectrum) < floor:
        log.warning("spectrum clipped below %.1e before square root", floor)
        spectrum = np.maximum(spectrum, floor)
    return spectrum


def stationary_prior_kernel(spectrum, inverse: bool = False, floor: float = SPECTRUM_FLOOR) -> np.ndarray:
    """Periodic square-root kernel of a stationary (block-)circulant operator.

    For a scalar spectrum (any number of periodic axes) returns
    ``ifft(sqrt(spectrum))``, or ``ifft(spectrum ** -0.5)`` with ``inverse``.
    A matrix-valued spectrum of shape ``(c, c, ny, nx)`` (channels coupled at
    each spatial frequency) takes the symmetric matrix square root per
    frequency and returns kernels of the same shape.  Kernels are stored with
    the lag-zero tap at index 0 along each spatial axis.
    """
    s = np.asarray(spectrum)
    if np.iscomplexobj(s):
        if np.max(np.abs(s.imag)) > 1e-8 * max(np.max(np.abs(s.real)), 1.0):
            raise NotACovarianceError("spectrum is not real")
        s = s.real
    s = s.astype(np.float64)
    if s.ndim == 4 and s.shape[0] == s.shape[1] and s.shape[0] > 1:
        mats = np.moveaxis(s, (0, 1), (-2, -1))
        mats = 0.5 * (mats + np.swapaxes(mats, -1, -2))
        vals, vecs = np.linalg.eigh(mats)
        vals = _floor(vals, floor)
        root = vals**-0.5 if inverse else np.sqrt(vals)
        sq = np.einsum("...ik,...k,...jk->...ij", vecs, root, vecs)
        sq = np.moveaxis(sq, (-2, -1), (0, 1))
        return np.fft.ifft2(sq, axes=(-2, -1)).real
    s = _floor(s, floor)
    root = s**-0.5 if inverse else np.sqrt(s)
    return np.fft.ifftn(root).real


def block_spectrum(q: SparseSym, shape: tuple, tol: float = 1e-8) -> np.ndarray:
    """Per-frequency ``(c, c)`` spectra of a precision that is circulant in space.

    ``shape`` is ``(c, ny, nx)``; the result has shape ``(c, c, ny, nx)``.
    Raises ValueError when ``q`` is not translation invariant.
    """
    c, ny, nx = shape
    m = q.matrix.tocsc()
    cols = np.empty((c, c, ny, nx))
    for tp in range(c):
        col = m[:, tp * ny * nx].toarray().reshape(c, ny, nx)
        cols[:, tp] = col
    # translation check on a second anchor
    shift = (ny // 2, nx // 3)
    for tp in range(c):
        anchor = tp * ny * nx + shift[0] * nx + shift[1]
        col = m[:, anchor].toarray().reshape(c, ny, nx)
        if np.max(np.abs(col - np.roll(cols[:, tp], shift, axis=(-2, -1)))) > tol * max(abs(m).max(), 1):
            raise ValueError("precision is not stationary in space")
    return np.fft.fft2(cols, axes=(-2, -1))


def correlation_taps(kernel: np.ndarray) -> np.ndarray:
    """Convert periodic kernels (lag 0 at index 0) into odd, centred conv2d taps.

    ``kernel`` has shape ``(ny, nx)`` or ``(c_out, c_in, ny, nx)``.  The operator
    ``(L u)(s) = sum_d kernel[d] u(s - d)`` becomes the cross-correlation
    ``sum_j taps[j] u(s + j - r)``, so ``taps[r + j] = kernel[-j]``.  For even
    sizes the Nyquist lag is split evenly between ``+n/2`` and ``-n/2``.
    """
    k = np.asarray(kernel, dtype=np.float64)
    if k.ndim == 2:
        k = k[None, None]
    ny, nx = k.shape[-2:]
    ry, rx = ny // 2, nx // 2
    taps = np.zeros(k.shape[:2] + (2 * ry + 1, 2 * rx + 1))
    for jy in range(-ry, ry + 1):
        wy = 0.5 if (ny % 2 == 0 and abs(jy) == ry) else 1.0
        for jx in range(-rx, rx + 1):
            wx = 0.5 if (nx % 2 == 0 and abs(jx) == rx) else 1.0
            taps[:, :, ry + jy, rx + jx] = wy * wx * k[:, :, (-jy) % ny, (-jx) % nx]
    return taps


def precision_sqrt_taps(q: SparseSym, shape: tuple) -> np.ndarray:
    """conv2d taps ``k`` with ``||conv(x, k)||^2 = x^T Q x`` for stationary periodic ``Q``."""
    spec = block_spectrum(q, shape)
    return correlation_taps(stationary_prior_kernel(spec))
