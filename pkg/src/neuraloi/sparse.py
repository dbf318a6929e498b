"""Sparse symmetric matrices, Cholesky factors and SPD solves.

The factorization runs SuperLU in symmetric mode with diagonal pivoting
disabled; on an SPD matrix that is an LDL^T factorization, from which the
Cholesky factor is ``L_unit * sqrt(D)``.  Fill-reducing ordering is minimum
degree on the symmetric pattern.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)

DIRECT_LIMIT = 100_000
_ORDERINGS = {"amd": "MMD_AT_PLUS_A", "natural": "NATURAL"}


class NotSPDError(np.linalg.LinAlgError):
    """Matrix is not symmetric positive-definite (non-positive pivot)."""


class IterationLimitError(RuntimeError):
    """An iterative solve hit its iteration cap before reaching tolerance."""


@dataclass(frozen=True, eq=False)
class SparseSym:
    """Symmetric matrix in compressed-row storage."""

    n: int
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray

    @classmethod
    def from_scipy(cls, m, check: bool = True, rtol: float = 1e-12) -> "SparseSym":
        m = sp.csr_matrix(m, dtype=np.float64)
        m.sum_duplicates()
        m.sort_indices()
        if m.shape[0] != m.shape[1]:
            raise ValueError(f"matrix must be square, got {m.shape}")
        if not np.isfinite(m.data).all():
            raise ValueError("matrix has non-finite entries")
        if check:
            asym = abs(m - m.T)
            scale = abs(m).max() if m.nnz else 0.0
            if asym.nnz and asym.max() > rtol * max(scale, 1.0):
                raise ValueError("matrix is not symmetric")
        return cls(m.shape[0], m.indptr, m.indices, m.data)

    @classmethod
    def from_dense(cls, a) -> "SparseSym":
        return cls.from_scipy(sp.csr_matrix(np.asarray(a, dtype=np.float64)))

    @classmethod
    def identity(cls, n: int, scale: float = 1.0) -> "SparseSym":
        return cls.from_scipy(scale * sp.identity(n, format="csr"))

    @property
    def matrix(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.data, self.indices, self.indptr), shape=(self.n, self.n))

    @property
    def nnz(self) -> int:
        return int(self.indptr[-1])

    def to_dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def diagonal(self) -> np.ndarray:
        return self.matrix.diagonal()

    def row_nnz(self) -> np.ndarray:
        return np.diff(self.indptr)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return apply(self, x)

    def quad_form(self, x: np.ndarray) -> float:
        return quad_form(self, x)

    def __add__(self, other: "SparseSym") -> "SparseSym":
        return SparseSym.from_scipy(self.matrix + other.matrix, check=False)


def _as_vector(x, n: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.size != n:
        raise ValueError(f"vector of length {x.size} does not match dimension {n}")
    return x.reshape(n)


def apply(a: SparseSym, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return (a.matrix @ _as_vector(x, a.n)).reshape(x.shape)


def quad_form(a: SparseSym, x) -> float:
    v = _as_vector(x, a.n)
    return float(v @ (a.matrix @ v))


@dataclass(frozen=True, eq=False)
class CholFactor:
    """``A[perm][:, perm] = L @ L.T`` with ``L`` sparse lower-triangular."""

    L: sp.csr_matrix
    perm: np.ndarray
    _lu: object = None

    @property
    def n(self) -> int:
        return self.L.shape[0]

    def solve(self, b) -> np.ndarray:
        b = np.asarray(b, dtype=np.float64)
        if self._lu is not None:
            return self._lu.solve(b)
        y = spla.spsolve_triangular(self.L, b[self.perm], lower=True)
        z = spla.spsolve_triangular(self.L.T.tocsr(), y, lower=False)
        out = np.empty_like(z)
        out[self.perm] = z
        return out

    def sqrt_operator(self) -> sp.csr_matrix:
        """``R = L^T P`` so that ``||R x||^2 = x^T A x``."""
        n = self.n
        p = sp.csr_matrix((np.ones(n), (np.arange(n), self.perm)), shape=(n, n))
        return (self.L.T @ p).tocsr()

    def solve_sqrt_transpose(self, z) -> np.ndarray:
        """Solve ``R x = z``; maps white noise to samples with covariance ``A^-1``."""
        z = np.asarray(z, dtype=np.float64)
        y = spla.spsolve_triangular(self.L.T.tocsr(), z, lower=False)
        out = np.empty_like(y)
        out[self.perm] = y
        return out

    def logdet(self) -> float:
        return 2.0 * float(np.log(self.L.diagonal()).sum())


def cholesky(a: SparseSym, ordering: str = "amd") -> CholFactor:
    """Sparse Cholesky factorization of an SPD matrix."""
    if ordering not in _ORDERINGS:
        raise ValueError(f"ordering must be one of {sorted(_ORDERINGS)}")
    n = a.n
    if n == 0:
        raise ValueError("empty matrix")
    try:
        lu = spla.splu(
            a.matrix.tocsc(),
            permc_spec=_ORDERINGS[ordering],
            diag_pivot_thresh=0.0,
            options={"SymmetricMode": True},
        )
    except RuntimeError as exc:
        raise NotSPDError(f"factorization failed: {exc}") from None
    if not np.array_equal(lu.perm_r, lu.perm_c):
        raise NotSPDError("pivoting was required; matrix is not SPD")
    d = lu.U.diagonal()
    if not np.all(d > 0):
        raise NotSPDError(f"non-positive pivot {d.min():.3e}")
    L = (lu.L @ sp.diags(np.sqrt(d))).tocsr()
    L.sort_indices()
    # SuperLU: Pr A Pc = L U with Pr[perm_r[i], i] = 1, so A[perm][:, perm] = L L^T
    perm = np.argsort(lu.perm_r)
    return CholFactor(L, perm, lu)


def cg(
    a: SparseSym,
    b,
    tol: float = 1e-10,
    maxiter: int | None = None,
    x0=None,
) -> np.ndarray:
    """Jacobi-preconditioned conjugate gradients."""
    m = a.matrix
    b = _as_vector(b, a.n)
    maxiter = 10 * a.n if maxiter is None else maxiter
    inv_diag = 1.0 / m.diagonal()
    if not np.all(inv_diag > 0):
        raise NotSPDError("non-positive diagonal entry")
    x = np.zeros(a.n) if x0 is None else _as_vector(x0, a.n).copy()
    r = b - m @ x
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(a.n)
    z = inv_diag * r
    p = z.copy()
    rz = r @ z
    for _ in range(maxiter):
        if np.linalg.norm(r) <= tol * bnorm:
            return x
        ap = m @ p
        pap = p @ ap
        if pap <= 0:
            raise NotSPDError("matrix is not positive-definite along a search direction")
        alpha = rz / pap
        x += alpha * p
        r -= alpha * ap
        z = inv_diag * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    if np.linalg.norm(r) <= tol * bnorm:
        return x
    raise IterationLimitError(
        f"CG stopped after {maxiter} iterations at relative residual "
        f"{np.linalg.norm(r) / bnorm:.2e}"
    )


def solve_spd(a: SparseSym, b, method: str = "auto", tol: float = 1e-10, maxiter=None) -> np.ndarray:
    """Solve ``A x = b``; direct Cholesky up to ``DIRECT_LIMIT`` unknowns, CG above."""
    b = np.asarray(b, dtype=np.float64)
    if method == "auto":
        method = "direct" if a.n <= DIRECT_LIMIT else "cg"
    if method == "direct":
        return cholesky(a).solve(_as_vector(b, a.n)).reshape(b.shape)
    if method == "cg":
        return cg(a, b, tol=tol, maxiter=maxiter).reshape(b.shape)
    raise ValueError(f"unknown method {method!r}")
