"""Sparse symmetric matrices, the matrix norm, diagonal dominance and the
approximate-solver contract.

Two solver backends share one contract: ``solve_approx`` (preconditioned
conjugate gradients) and ``solve_direct`` (Cholesky factorization). Any
returned ``x`` must satisfy::

    ||x - M^{-1} b||_M <= eps * ||M^{-1} b||_M

with ``||v||_M = sqrt(v^T M v)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.io
import scipy.linalg
from scipy.linalg.lapack import dpotrf as _potrf, dpotrs as _potrs
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = [
    "SparseSym",
    "TwoNnzFactor",
    "DiagMatrix",
    "SolveConfig",
    "ConvergenceError",
    "SingularMatrixError",
    "mat_vec",
    "gram",
    "m_norm",
    "dominated_rows",
    "is_dd",
    "solve_approx",
    "solve_direct",
    "solve_gram",
    "pcg",
    "make_rng",
    "read_matrix_market",
    "write_matrix_market",
    "read_factor",
    "write_factor",
]

# Relative slack for diagonal dominance: row sums of exactly dominant rows
# can dip below zero in floating point.
TOL_DD = 1e-9


class ConvergenceError(RuntimeError):
    """Iterative solve hit its iteration cap before the stopping rule."""

    def __init__(self, message, x=None, residual=np.nan, iterations=0):
        super().__init__(message)
        self.x = x
        self.residual = residual
        self.iterations = iterations


class SingularMatrixError(np.linalg.LinAlgError):
    """Matrix is numerically singular or not positive definite."""


def make_rng(seed=None) -> np.random.Generator:
    """Root generator; split it with ``rng.spawn(k)``."""
    return np.random.default_rng(seed)


class SparseSym:
    """Symmetric sparse matrix in compressed-column layout.

    The stored matrix is exactly symmetric, holds no explicit zeros and has
    sorted row indices in every column.
    """

    __slots__ = ("_mat",)

    def __init__(self, matrix, *, check=True, rtol=1e-12):
        mat = sp.csc_matrix(matrix, dtype=float)
        if mat.shape[0] != mat.shape[1]:
            raise ValueError(f"SparseSym must be square, got {mat.shape}")
        if mat.nnz and not np.all(np.isfinite(mat.data)):
            raise ValueError("SparseSym entries must be finite")
        if check and mat.nnz:
            asym = abs(mat - mat.T)
            scale = abs(mat).max()
            if asym.nnz and asym.max() > rtol * scale:
                raise ValueError(
                    f"matrix is not symmetric (max |M - M^T| = {asym.max():.3e})"
                )
        # Exact symmetry: mirror the average so (i,j) and (j,i) agree bitwise.
        mat = ((mat + mat.T) * 0.5).tocsc()
        mat.eliminate_zeros()
        mat.sort_indices()
        self._mat = mat

    @classmethod
    def from_dense(cls, array):
        return cls(sp.csc_matrix(np.asarray(array, dtype=float)))

    @classmethod
    def identity(cls, n):
        return cls(sp.identity(n, format="csc"), check=False)

    @property
    def n(self) -> int:
        return self._mat.shape[0]

    @property
    def shape(self):
        return self._mat.shape

    @property
    def matrix(self) -> sp.csc_matrix:
        """Underlying ``csc_matrix``. Treat as read-only."""
        return self._mat

    def diagonal(self) -> np.ndarray:
        return self._mat.diagonal()

    def toarray(self) -> np.ndarray:
        return self._mat.toarray()

    def entries(self):
        """Iterate ``(row, col, value)`` triples in column-major order."""
        coo = self._mat.tocoo()
        return list(zip(coo.row.tolist(), coo.col.tolist(), coo.data.tolist()))

    def scaled(self, d) -> "SparseSym":
        """Return ``diag(d) M diag(d)``."""
        d = np.asarray(d, dtype=float)
        D = sp.diags(d)
        return SparseSym(D @ self._mat @ D, check=False)

    def submatrix(self, rows, cols=None):
        """Plain sparse block ``M[rows][:, cols]``."""
        cols = rows if cols is None else cols
        return self._mat[rows][:, cols]

    def principal(self, idx) -> "SparseSym":
        return SparseSym(self._mat[idx][:, idx], check=False)

    def __matmul__(self, x):
        return self._mat @ x

    def __repr__(self):
        return f"SparseSym(n={self.n}, nnz={self._mat.nnz})"


class TwoNnzFactor:
    """``n x m`` sparse matrix with one or two nonzeros in every column.

    Represents the M-matrix ``A A^T``.
    """

    __slots__ = ("_mat",)

    def __init__(self, matrix):
        mat = sp.csc_matrix(matrix, dtype=float)
        mat.eliminate_zeros()
        mat.sort_indices()
        if mat.nnz and not np.all(np.isfinite(mat.data)):
            raise ValueError("factor entries must be finite")
        counts = np.diff(mat.indptr)
        if np.any(counts < 1) or np.any(counts > 2):
            bad = int(np.flatnonzero((counts < 1) | (counts > 2))[0])
            raise ValueError(
                f"column {bad} has {counts[bad]} nonzeros; expected 1 or 2"
            )
        self._mat = mat

    @classmethod
    def from_columns(cls, n, columns):
        """Build from a list of columns, each a list of ``(row, value)``."""
        rows, cols, vals = [], [], []
        for j, col in enumerate(columns):
            for i, v in col:
                rows.append(i)
                cols.append(j)
                vals.append(v)
        mat = sp.csc_matrix((vals, (rows, cols)), shape=(n, len(columns)))
        return cls(mat)

    @property
    def n(self) -> int:
        return self._mat.shape[0]

    @property
    def m(self) -> int:
        return self._mat.shape[1]

    @property
    def matrix(self) -> sp.csc_matrix:
        return self._mat

    @property
    def cols(self):
        """Per-column list of ``(row, value)`` pairs."""
        m = self._mat
        return [
            list(zip(m.indices[m.indptr[j]:m.indptr[j + 1]].tolist(),
                     m.data[m.indptr[j]:m.indptr[j + 1]].tolist()))
            for j in range(self.m)
        ]

    def permute_columns(self, perm) -> "TwoNnzFactor":
        return TwoNnzFactor(self._mat[:, perm])

    def scale_rows(self, d) -> "TwoNnzFactor":
        return TwoNnzFactor(sp.diags(np.asarray(d, dtype=float)) @ self._mat)

    def toarray(self):
        return self._mat.toarray()

    def __repr__(self):
        return f"TwoNnzFactor(n={self.n}, m={self.m})"


@dataclass(frozen=True)
class DiagMatrix:
    """Positive diagonal matrix, stored as its diagonal."""

    d: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.d, dtype=float).ravel()
        if not np.all(np.isfinite(d)) or np.any(d <= 0):
            raise ValueError("DiagMatrix entries must be finite and > 0")
        object.__setattr__(self, "d", d)

    @property
    def n(self) -> int:
        return self.d.size

    @classmethod
    def identity(cls, n):
        return cls(np.ones(n))

    def __matmul__(self, x):
        return self.d * x if np.ndim(x) == 1 else self.d[:, None] * x


@dataclass(frozen=True)
class SolveConfig:
    """Parameters of one approximate solve.

    ``lambda_bounds`` optionally gives ``(lambda_lo, lambda_hi)`` for the
    system matrix; it tightens the residual stopping rule.
    """

    eps: float = 1e-6
    max_iters: int = 10_000
    seed: int | None = None
    backend: str = "iterative"
    precond: str = "jacobi"
    lambda_bounds: tuple | None = None

    def __post_init__(self):
        if not 0 < self.eps < 1:
            raise ValueError(f"eps must lie in (0, 1), got {self.eps}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.backend not in ("iterative", "direct"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.precond not in ("jacobi", "ilu", "none"):
            raise ValueError(f"unknown preconditioner {self.precond!r}")


def _as_matrix(M):
    return M.matrix if isinstance(M, SparseSym) else M


def mat_vec(M: SparseSym, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (M.n,):
        raise ValueError(f"dimension mismatch: M is {M.n}x{M.n}, x has shape {x.shape}")
    return M.matrix @ x


def gram(F: TwoNnzFactor, w=None) -> SparseSym:
    """``A diag(w) A^T`` for a factor ``A`` and positive column weights."""
    A = F.matrix if isinstance(F, TwoNnzFactor) else sp.csc_matrix(F)
    if w is None:
        w = np.ones(A.shape[1])
    w = w.d if isinstance(w, DiagMatrix) else np.asarray(w, dtype=float)
    if w.shape != (A.shape[1],):
        raise ValueError(
            f"dimension mismatch: factor has {A.shape[1]} columns, weights {w.shape}"
        )
    if np.any(w < 0):
        raise ValueError("gram weights must be nonnegative")
    return SparseSym((A @ sp.diags(w) @ A.T).tocsc(), check=False)


def m_norm(M, v) -> float:
    """``sqrt(v^T M v)``; raises if the quadratic form is clearly negative."""
    v = np.asarray(v, dtype=float)
    q = float(v @ (_as_matrix(M) @ v))
    if q < 0:
        scale = abs(_as_matrix(M)).max() * float(v @ v) if v.size else 0.0
        if q < -1e-10 * max(1.0, scale):
            raise ValueError(f"v^T M v = {q:.3e} < 0: matrix is not PSD")
        return 0.0
    return float(np.sqrt(q))


def dominated_rows(M, tol_dd=TOL_DD) -> np.ndarray:
    """Boolean mask of rows with ``m_ii >= sum_{j != i} |m_ij| - tol``."""
    mat = _as_matrix(M)
    diag = mat.diagonal()
    absrow = np.asarray(abs(mat).sum(axis=1)).ravel() - np.abs(diag)
    tol = tol_dd * (diag.max() if diag.size else 0.0)
    return diag >= absrow - tol


def is_dd(M, tol_dd=TOL_DD) -> bool:
    return bool(np.all(dominated_rows(M, tol_dd)))


def _preconditioner(mat, kind):
    if kind == "none":
        return lambda r: r
    if kind == "ilu":
        ilu = spla.spilu(mat.tocsc(), drop_tol=1e-4, fill_factor=10)
        return ilu.solve
    diag = mat.diagonal()
    if np.any(diag <= 0):
        raise SingularMatrixError("nonpositive diagonal: matrix is not SPD")
    inv = 1.0 / diag
    return lambda r: inv * r


def pcg(matvec, b, precond, rtol, max_iters, x0=None):
    """Preconditioned conjugate gradients on an SPD operator.

    Stops when ``||r||_2 <= rtol * ||b||_2``. Returns ``(x, iterations,
    relative_residual)``; raises :class:`ConvergenceError` at the cap.
    """
    b = np.asarray(b, dtype=float)
    bnorm = np.linalg.norm(b)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    if bnorm == 0:
        return np.zeros_like(b), 0, 0.0
    r = b - matvec(x) if x0 is not None else b.copy()
    target = rtol * bnorm
    rnorm = np.linalg.norm(r)
    if rnorm <= target:
        return x, 0, rnorm / bnorm
    z = precond(r)
    p = z.copy()
    rz = r @ z
    for it in range(1, max_iters + 1):
        Ap = matvec(p)
        pAp = p @ Ap
        if pAp <= 0:
            raise SingularMatrixError("p^T M p <= 0: matrix is not positive definite")
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        rnorm = np.linalg.norm(r)
        if rnorm <= target:
            return x, it, rnorm / bnorm
        z = precond(r)
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise ConvergenceError(
        f"PCG did not reach relative residual {rtol:.2e} in {max_iters} iterations "
        f"(achieved {rnorm / bnorm:.2e})",
        x=x, residual=rnorm / bnorm, iterations=max_iters,
    )


def residual_target(eps, lambda_bounds=None):
    """Relative residual that implies a matrix-norm error of ``eps``."""
    if lambda_bounds is not None:
        lo, hi = lambda_bounds
        return eps * np.sqrt(lo / hi)
    return eps * 1e-2


def solve_approx(M: SparseSym, b, cfg: SolveConfig | None = None) -> np.ndarray:
    """Approximate solve of ``M x = b`` in the matrix norm.

    The iterative backend runs PCG until ``||r|| / ||b||`` falls below
    ``eps * sqrt(lambda_lo / lambda_hi)`` (or ``eps * 1e-2`` without
    eigenvalue bounds). The direct backend factors ``M``.
    """
    cfg = SolveConfig() if cfg is None else cfg
    b = np.asarray(b, dtype=float)
    if b.shape != (M.n,):
        raise ValueError(f"dimension mismatch: M is {M.n}x{M.n}, b has shape {b.shape}")
    if cfg.backend == "direct":
        return solve_direct(M, b)
    mat = M.matrix
    x, _, _ = pcg(
        lambda v: mat @ v,
        b,
        _preconditioner(mat, cfg.precond),
        residual_target(cfg.eps, cfg.lambda_bounds),
        cfg.max_iters,
    )
    return x


def solve_direct(M, b, robust=False) -> np.ndarray:
    """Solve ``M x = b`` for SPD ``M`` by a symmetrically equilibrated Cholesky
    factorization with one step of iterative refinement.

    ``b`` may be a vector or a matrix of right-hand sides. With
    ``robust=True``, a matrix too ill-conditioned for Cholesky is solved by
    a pivoted symmetric-indefinite factorization instead of raising.
    """
    mat = _as_matrix(M)
    b = np.asarray(b, dtype=float)
    n = mat.shape[0]
    if b.shape[0] != n:
        raise ValueError(f"dimension mismatch: M is {n}x{n}, b has shape {b.shape}")
    if n == 0:
        return np.zeros_like(b)
    dense = mat.toarray() if sp.issparse(mat) else np.asarray(mat, dtype=float)
    try:
        return _cholesky_solve(dense, b)
    except SingularMatrixError:
        if not robust:
            raise
    return _pivoted_solve(dense, b)


def _equilibrate(dense):
    diag = np.diag(dense).copy()
    if np.any(diag <= 0) or not np.all(np.isfinite(diag)):
        raise SingularMatrixError("nonpositive diagonal: matrix is not SPD")
    d = 1.0 / np.sqrt(diag)
    return d, dense * d[:, None] * d[None, :]


def _cholesky_solve(dense, b):
    d, scaled = _equilibrate(dense)
    factor, info = _potrf(scaled, lower=1, clean=1)
    if info != 0:
        raise SingularMatrixError(f"Cholesky failed (info = {info})")
    piv = np.abs(np.diag(factor))
    if piv.min() <= 1e-13 * piv.max():
        raise SingularMatrixError("matrix is numerically singular")
    dd = d if b.ndim == 1 else d[:, None]
    rhs = b * dd
    y, _ = _potrs(factor, rhs, lower=1)
    # one refinement step on the equilibrated system
    corr, _ = _potrs(factor, rhs - scaled @ y, lower=1)
    return (y + corr) * dd


def _pivoted_solve(dense, b):
    d, scaled = _equilibrate(dense)
    dd = d if b.ndim == 1 else d[:, None]
    rhs = b * dd
    lu = scipy.linalg.lu_factor(scaled, check_finite=False)
    y = scipy.linalg.lu_solve(lu, rhs, check_finite=False)
    y += scipy.linalg.lu_solve(lu, rhs - scaled @ y, check_finite=False)
    if not np.all(np.isfinite(y)):
        raise SingularMatrixError("matrix is numerically singular")
    return y * dd


_QR_PIVOT_FLOOR = 1e-23


def solve_gram(B, b) -> np.ndarray:
    """Solve ``(B B^T) x = b`` from the factor ``B`` (``n x k``, dense).

    Uses a Householder QR of ``B^T`` with rows sorted by decreasing norm,
    so ``B B^T`` is never formed. Its condition number is the square root
    of that of the product, which matters when column scales span many
    orders of magnitude. ``b`` may hold several right-hand sides as columns.
    """
    B = np.asarray(B, dtype=float)
    b = np.asarray(b, dtype=float)
    n = B.shape[0]
    if b.shape[0] != n:
        raise ValueError(f"dimension mismatch: B has {n} rows, b has shape {b.shape}")
    if n == 0:
        return np.zeros_like(b)
    Bt = B.T
    order = np.argsort(-np.einsum("ij,ij->i", Bt, Bt), kind="stable")
    R = scipy.linalg.qr(Bt[order], mode="r", check_finite=False)[0][:n]
    rd = np.abs(np.diag(R))
    # Interior-point systems are legitimately this ill-conditioned; only an
    # exactly vanishing pivot (relative to the largest) counts as singular.
    if R.shape[0] < n or not rd.min() > _QR_PIVOT_FLOOR * rd.max():
        raise SingularMatrixError("B B^T is numerically singular")

    def apply_inv(r):
        w = scipy.linalg.solve_triangular(R, r, trans="T", check_finite=False)
        return scipy.linalg.solve_triangular(R, w, check_finite=False)

    x = apply_inv(b)
    x += apply_inv(b - B @ (Bt @ x))
    return x


# -- Matrix Market fixtures --------------------------------------------------

def read_matrix_market(path) -> SparseSym:
    mat = scipy.io.mmread(str(path))
    return SparseSym(sp.csc_matrix(mat))


def write_matrix_market(path, M: SparseSym, comment=""):
    """Write ``M`` in symmetric coordinate format (lower triangle stored)."""
    scipy.io.mmwrite(str(Path(path)), sp.tril(M.matrix).tocoo(),
                     comment=comment, symmetry="symmetric")


def read_factor(path) -> TwoNnzFactor:
    return TwoNnzFactor(sp.csc_matrix(scipy.io.mmread(str(path))))


def write_factor(path, F: TwoNnzFactor, comment=""):
    scipy.io.mmwrite(str(Path(path)), F.matrix.tocoo(), comment=comment,
                     symmetry="general")
