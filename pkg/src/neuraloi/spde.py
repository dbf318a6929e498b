"""Space-time Gaussian fields from a diffusion SPDE.

The field solves ``(d/dt + A^{alpha/2}) x = tau z`` with the spatial operator
``A = kappa^2 - div(H grad)`` and ``H = gamma I + beta v v^T``.  Space is
discretized by finite differences, time by implicit Euler:

    B x_k = x_{k-1} + dt tau z_k,      B = I + dt A^{alpha/2}

``A`` is time-invariant and symmetric, so ``M = B^{-1}`` is symmetric and the
stationary covariance of the recurrence is ``c^2 M^2 (I - M^2)^{-1}`` with
``c = dt tau``.  Its precision ``(B^2 - I) / c^2`` is sparse, which gives both
an exact stationary initial state and an exact window precision matrix.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .sparse import CholFactor, SparseSym, cholesky

log = logging.getLogger(__name__)

BOUNDARIES = ("periodic", "neumann")


class StabilityError(ValueError):
    """The discretized operator is not symmetric positive-definite."""


@dataclass(frozen=True)
class SpdeParams:
    nx: int = 32
    ny: int = 32
    nt: int = 64
    dx: float = 1.0
    dy: float = 1.0
    dt: float = 1.0
    kappa: float = 0.33
    tau: float = 1.0
    alpha: int = 4
    gamma: float = 1.0
    beta: float = 25.0
    velocity_amplitude: float = 1.0
    velocity_modes: int = 1
    boundary: str = "periodic"
    burn_in: int = 50
    velocity: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2 or self.nt < 1:
            raise ValueError("grid needs nx, ny >= 2 and nt >= 1")
        if min(self.dx, self.dy, self.dt) <= 0:
            raise ValueError("grid steps must be positive")
        if self.kappa <= 0 or self.tau < 0 or self.gamma <= 0 or self.beta < 0:
            raise ValueError("need kappa > 0, tau >= 0, gamma > 0, beta >= 0")
        if self.alpha < 2 or self.alpha % 2:
            raise ValueError("alpha must be an even integer >= 2")
        if self.boundary not in BOUNDARIES:
            raise ValueError(f"boundary must be one of {BOUNDARIES}")
        if self.burn_in < 0:
            raise ValueError("burn_in must be >= 0")
        if self.velocity is not None and np.shape(self.velocity) != (2, self.ny, self.nx):
            raise ValueError(f"velocity must have shape (2, {self.ny}, {self.nx})")

    @property
    def n_space(self) -> int:
        return self.nx * self.ny

    @property
    def noise_scale(self) -> float:
        return self.dt * self.tau

    def replace(self, **changes) -> "SpdeParams":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("velocity")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SpdeParams":
        names = {f.name for f in dataclasses.fields(cls)} - {"velocity"}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown SPDE parameters: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def gp_diff2(cls, **overrides) -> "SpdeParams":
        """Full-size anisotropic configuration (100 x 100 x 500)."""
        base = dict(nx=100, ny=100, nt=500, kappa=0.33, tau=1.0, alpha=4, gamma=1.0, beta=25.0)
        base.update(overrides)
        return cls(**base)


@dataclass(frozen=True)
class Field3D:
    """Space-time grid ``values[t, y, x]`` with its spacing."""

    values: np.ndarray
    dx: float = 1.0
    dy: float = 1.0
    dt: float = 1.0

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3:
            raise ValueError(f"Field3D needs 3 dimensions, got shape {v.shape}")
        if v.dtype != bool and not np.isfinite(v).all():
            raise ValueError("Field3D values must be finite")

    @property
    def shape(self) -> tuple:
        return self.values.shape


# ---------------------------------------------------------------------------
# velocity and diffusion tensor


def eddy_velocity(xc, yc, lx: float, ly: float, amplitude: float = 1.0, modes: int = 1):
    """Periodic cellular (eddy) flow; divergence-free on square domains."""
    kx = 2.0 * np.pi * modes / lx
    ky = 2.0 * np.pi * modes / ly
    v1 = amplitude * np.sin(kx * xc) * np.cos(ky * yc)
    v2 = -amplitude * np.cos(kx * xc) * np.sin(ky * yc)
    return v1, v2


def eddy_divergence(xc, yc, lx: float, ly: float, amplitude: float = 1.0, modes: int = 1):
    kx = 2.0 * np.pi * modes / lx
    ky = 2.0 * np.pi * modes / ly
    return amplitude * (kx - ky) * np.cos(kx * xc) * np.cos(ky * yc)


def default_velocity_field(
    nx: int, ny: int, dx: float = 1.0, dy: float = 1.0, amplitude: float = 1.0, modes: int = 1
) -> np.ndarray:
    """``(2, ny, nx)`` array of (v1, v2) at grid nodes."""
    xc = np.arange(nx) * dx
    yc = np.arange(ny) * dy
    xx, yy = np.meshgrid(xc, yc)
    return np.stack(eddy_velocity(xx, yy, nx * dx, ny * dy, amplitude, modes))


def velocity_of(params: SpdeParams) -> np.ndarray:
    if params.velocity is not None:
        return np.asarray(params.velocity, dtype=np.float64)
    return default_velocity_field(
        params.nx, params.ny, params.dx, params.dy, params.velocity_amplitude, params.velocity_modes
    )


def diffusion_tensor(params: SpdeParams) -> tuple:
    """Components ``(H11, H12, H22)`` of ``gamma I + beta v v^T`` per node."""
    v1, v2 = velocity_of(params)
    g, b = params.gamma, params.beta
    return g + b * v1 * v1, b * v1 * v2, g + b * v2 * v2


# ---------------------------------------------------------------------------
# operators


def _difference(n_fast: int, n_slow: int, axis: str, sign: int, step: float, periodic: bool):
    """One-sided difference ``sign * (u[s + sign] - u[s]) / step`` along one axis."""
    ny, nx = n_slow, n_fast
    idx = np.arange(nx * ny).reshape(ny, nx)
    if axis == "x":
        nb = np.roll(idx, -sign, axis=1)
        valid = np.ones((ny, nx), bool)
        if not periodic:
            valid[:, -1 if sign > 0 else 0] = False
    else:
        nb = np.roll(idx, -sign, axis=0)
        valid = np.ones((ny, nx), bool)
        if not periodic:
            valid[-1 if sign > 0 else 0, :] = False
    rows = idx[valid]
    cols = nb[valid]
    n = nx * ny
    w = sign / step
    return sp.csr_matrix(
        (np.concatenate([np.full(rows.size, w), np.full(rows.size, -w)]),
         (np.concatenate([rows, rows]), np.concatenate([cols, rows]))),
        shape=(n, n),
    )


def diffusion_operator(params: SpdeParams) -> sp.csr_matrix:
    """Discrete ``-div(H grad)`` as a symmetric positive semi-definite matrix.

    Average over the four one-sided gradient pairs (forward/backward in x and
    y) of ``G_q^T H G_q``.  Each term is a Gram form, so the sum is PSD for any
    SPD ``H``; for constant isotropic ``H`` it is the 5-point Laplacian, and
    the cross terms make the general stencil 9-point.
    """
    periodic = params.boundary == "periodic"
    h11, h12, h22 = (sp.diags(h.ravel()) for h in diffusion_tensor(params))
    out = sp.csr_matrix((params.n_space, params.n_space))
    for sx in (1, -1):
        dxm = _difference(params.nx, params.ny, "x", sx, params.dx, periodic)
        for sy in (1, -1):
            dym = _difference(params.nx, params.ny, "y", sy, params.dy, periodic)
            out = out + dxm.T @ h11 @ dxm + dym.T @ h22 @ dym + dxm.T @ h12 @ dym + dym.T @ h12 @ dxm
    out = 0.25 * out
    return ((out + out.T) * 0.5).tocsr()


def build_spatial_operator(params: SpdeParams, t: int = 0) -> SparseSym:
    """``A = kappa^2 I - div(H grad)``; the velocity field does not vary in time."""
    if not 0 <= t < max(params.nt + params.burn_in, 1):
        raise ValueError(f"time index {t} outside the simulation")
    a = params.kappa**2 * sp.identity(params.n_space, format="csr") + diffusion_operator(params)
    a = a.tocsr()
    a.eliminate_zeros()
    diag = a.diagonal()
    off = abs(a - sp.diags(diag)).sum(axis=1).A1
    if params.beta == 0 and np.any(diag <= off - 1e-12):
        raise StabilityError("isotropic operator lost diagonal dominance")
    return SparseSym.from_scipy(a)


def step_operator(params: SpdeParams) -> sp.csr_matrix:
    """``B = I + dt A^{alpha/2}`` (the implicit Euler system matrix)."""
    a = build_spatial_operator(params).matrix
    power = a
    for _ in range(params.alpha // 2 - 1):
        power = power @ a
    b = sp.identity(params.n_space, format="csr") + params.dt * power
    return ((b + b.T) * 0.5).tocsr()


def _check_noise(params: SpdeParams) -> None:
    if params.noise_scale == 0:
        raise ValueError("precision is undefined without forcing noise (tau = 0)")


def stationary_precision(params: SpdeParams) -> SparseSym:
    """Precision ``(B^2 - I) / c^2`` of a single stationary time slice."""
    _check_noise(params)
    b = step_operator(params)
    s = (b @ b - sp.identity(params.n_space)) / params.noise_scale**2
    return SparseSym.from_scipy((s + s.T) * 0.5)


def precision_matrix(params: SpdeParams, window: int | tuple = 5) -> SparseSym:
    """Space-time precision of ``window`` consecutive stationary slices.

    Writing ``r_k = B x_k - x_{k-1}`` (iid ``N(0, c^2 I)``) and using the
    stationary slice precision for ``x_1``:

        c^2 Q = blocks  [B^2   -B              ]
                        [-B   B^2+I  -B        ]
                        [      ...   ...   -B  ]
                        [            -B    B^2 ]

    i.e. ``c^2 Q = S^T S - E_11`` where ``S`` is block bidiagonal with ``B`` on
    the diagonal and ``-I`` below it.  A single slice gives ``(B^2 - I)/c^2``.
    Unknowns are ordered (t, y, x) row-major.
    """
    _check_noise(params)
    if isinstance(window, tuple):
        start, stop = window
        window = stop - start
    if window < 1:
        raise ValueError("window must contain at least one time step")
    n = params.n_space
    b = step_operator(params)
    eye = sp.identity(n, format="csr")
    b2 = b @ b
    if window == 1:
        q = b2 - eye
    else:
        diag_blocks = [b2] + [b2 + eye] * (window - 2) + [b2]
        blocks = [[None] * window for _ in range(window)]
        for k in range(window):
            blocks[k][k] = diag_blocks[k]
            if k + 1 < window:
                blocks[k][k + 1] = -b
                blocks[k + 1][k] = -b
        q = sp.bmat(blocks, format="csr")
    q = q / params.noise_scale**2
    return SparseSym.from_scipy((q + q.T) * 0.5)


# ---------------------------------------------------------------------------
# simulation


@dataclass(eq=False)
class _Stepper:
    params: SpdeParams
    step_factor: CholFactor
    init_factor: CholFactor | None


def _stepper(params: SpdeParams) -> _Stepper:
    b = SparseSym.from_scipy(step_operator(params))
    init = cholesky(stationary_precision(params)) if params.noise_scale > 0 else None
    return _Stepper(params, cholesky(b), init)


def _stationary_draw(st: _Stepper, z: np.ndarray) -> np.ndarray:
    if st.init_factor is None:
        return np.zeros_like(z)
    return st.init_factor.solve_sqrt_transpose(z)


def simulate(params: SpdeParams, seed: int = 0, init: str = "stationary") -> Field3D:
    """Simulate ``nt`` kept steps after ``burn_in`` discarded ones.

    ``init="stationary"`` draws ``x_0`` from the exact stationary law of the
    recurrence; ``init="zero"`` starts from rest.
    """
    if init not in ("stationary", "zero"):
        raise ValueError("init must be 'stationary' or 'zero'")
    rng = np.random.default_rng(seed)
    st = _stepper(params)
    n = params.n_space
    c = params.noise_scale
    x = _stationary_draw(st, rng.standard_normal(n)) if init == "stationary" else np.zeros(n)
    out = np.empty((params.nt, n))
    for k in range(params.burn_in + params.nt):
        x = st.step_factor.solve(x + c * rng.standard_normal(n))
        if k >= params.burn_in:
            out[k - params.burn_in] = x
    return Field3D(out.reshape(params.nt, params.ny, params.nx), params.dx, params.dy, params.dt)


def sample_windows(params: SpdeParams, n_windows: int, window: int, seed: int = 0) -> np.ndarray:
    """Independent stationary windows, shape ``(n_windows, window, ny, nx)``."""
    rng = np.random.default_rng(seed)
    st = _stepper(params)
    n = params.n_space
    c = params.noise_scale
    x = _stationary_draw(st, rng.standard_normal((n, n_windows)))
    out = np.empty((n_windows, window, n))
    out[:, 0] = x.T
    for k in range(1, window):
        x = st.step_factor.solve(x + c * rng.standard_normal((n, n_windows)))
        out[:, k] = x.T
    return out.reshape(n_windows, window, params.ny, params.nx)


# ---------------------------------------------------------------------------
# empirical statistics


def lag_correlation(values: np.ndarray, lag_y: int, lag_x: int) -> float:
    """Empirical spatial correlation at a periodic lag, pooled over time."""
    v = np.asarray(values, dtype=np.float64)
    v = v - v.mean()
    shifted = np.roll(v, (-lag_y, -lag_x), axis=(-2, -1))
    return float((v * shifted).mean() / (v * v).mean())
