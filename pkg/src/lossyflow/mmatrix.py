"""Linear systems in symmetric M-matrices ``M = A A^T``.

The solver finds a positive diagonal ``D`` with ``D M D`` diagonally
dominant by repeated randomized rescaling, then solves the dominant system.
Each round keeps the rows that are already dominant (the top block) and
rescales the rest using Johnson-Lindenstrauss estimates of the diagonal of
the Schur complement onto the remaining rows.

:func:`solve_augmented` handles the two-block matrices produced by the
flow linear programs, plus a rank-one term, by Schur reduction to an
M-matrix system and a Sherman-Morrison correction.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .linalg import (
    DiagMatrix,
    SolveConfig,
    SparseSym,
    TwoNnzFactor,
    dominated_rows,
    gram,
    is_dd,
    solve_approx,
    solve_direct,
)

__all__ = [
    "MMatrixConfig",
    "ScalingState",
    "ScalingResult",
    "ScalingError",
    "InconsistencyError",
    "RankOneBreakdown",
    "AugSystem",
    "MMatrixSolver",
    "k_jl",
    "jl_bound",
    "estimate_schur_diagonals",
    "scaling_iteration",
    "find_dd_scaling",
    "mmatrix_solve",
    "random_scaling_trial",
    "small_diagonal_fraction",
    "scaling_trial_bound",
    "solve_augmented",
    "make_solver",
]

K_JL_CAP = 2**31


class ScalingError(RuntimeError):
    """The scaling loop hit ``max_outer_iters`` without reaching dominance."""

    def __init__(self, message, best_fraction=0.0, iterations=0):
        super().__init__(message)
        self.best_fraction = best_fraction
        self.iterations = iterations


class InconsistencyError(RuntimeError):
    """A rescaled diagonal came out non-positive.

    This means a tolerance or an eigenvalue bound was violated.
    """


class RankOneBreakdown(ArithmeticError):
    """``1 + v^T z`` is too close to zero for the Sherman-Morrison step."""


# -- Johnson-Lindenstrauss projection size -----------------------------------

def jl_bound(k, alpha, beta, gamma):
    """Lower bound on the Johnson-Lindenstrauss success probability at size ``k``.

    Vectorized over ``k``; returns ``-inf`` where ``gamma <= 2/(k-2)``.
    """
    k = np.asarray(k, dtype=float)
    g = gamma - 2.0 / (k - 2.0)
    t1 = 2.0 / (2.0 + (k - 4.0) * (1.0 - 2.0 / k) ** 2 * g**2)
    t2 = 2.0 / (beta * (2.0 + (alpha / (1.0 - alpha)) ** 2 * k))
    out = 1.0 - t1 - t2
    return np.where(g > 0, out, -np.inf)


def k_jl(alpha, beta, gamma, p):
    """Smallest ``k >= 5`` whose projection bound reaches ``p``.

    The bound is only meaningful once ``gamma > 2/(k-2)``; past that point
    it increases with ``k``, so an exponential search followed by bisection
    finds the threshold.
    """
    for name, val in (("alpha", alpha), ("beta", beta), ("gamma", gamma), ("p", p)):
        if not 0 < val < 1:
            raise ValueError(f"{name} must lie in (0, 1), got {val}")
    lo = max(5, math.floor(2 + 2 / gamma) + 1)
    if jl_bound(lo, alpha, beta, gamma) >= p:
        return int(lo)
    hi = lo
    while jl_bound(hi, alpha, beta, gamma) < p:
        lo = hi
        hi *= 2
        if hi > K_JL_CAP:
            if jl_bound(K_JL_CAP, alpha, beta, gamma) >= p:
                hi = K_JL_CAP
                break
            raise OverflowError(f"k_jl exceeds 2^31 for p = {p}")
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if jl_bound(mid, alpha, beta, gamma) >= p:
            hi = mid
        else:
            lo = mid
    return int(hi)


# -- configuration -----------------------------------------------------------

@dataclass(frozen=True)
class MMatrixConfig:
    """Parameters of the M-matrix solver.

    Fields left as ``None`` are filled by :meth:`resolve` from the mode:
    ``paper_exact`` uses the worst-case constants, ``practical`` uses
    ``k = 32`` and ``eps1 = eps2 = 1e-8``. Both use the same ``delta``.
    ``solver`` picks the inner backend for the dominant subsystems.
    """

    lambda_min: float
    lambda_max: float
    k: int | None = None
    delta: float | None = None
    eps1: float | None = None
    eps2: float | None = None
    max_outer_iters: int = 200
    mode: str = "practical"
    solver: str = "iterative"

    def __post_init__(self):
        if not 0 < self.lambda_min <= self.lambda_max:
            raise ValueError("need 0 < lambda_min <= lambda_max")
        if self.k is not None and self.k < 4:
            raise ValueError("k must be >= 4")
        for name in ("delta", "eps1", "eps2"):
            val = getattr(self, name)
            if val is not None and val <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.mode not in ("paper_exact", "practical"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.solver not in ("iterative", "direct"):
            raise ValueError(f"unknown solver {self.solver!r}")

    @property
    def kappa(self):
        return self.lambda_max / self.lambda_min

    def resolve(self, n, m):
        """Concrete ``(k, delta, eps1, eps2)`` for an ``n x m`` factor."""
        kappa = self.kappa
        delta = self.delta
        if delta is None:
            delta = math.sqrt(self.lambda_min) / (24 * math.sqrt(kappa) * n)
        if self.mode == "paper_exact":
            k = self.k or k_jl(1 / 100, 1 / 5, 1 / 100, 1 / 3)
            eps1 = self.eps1 or 0.005 / math.sqrt(1.01 * kappa * m * n)
            eps2 = self.eps2 or 1 / (72 * kappa**2.5 * n**2)
        else:
            k = self.k or 32
            eps1 = self.eps1 or 1e-8
            eps2 = self.eps2 or 1e-8
        return k, delta, eps1, eps2

    @classmethod
    def for_factor(cls, F: TwoNnzFactor, **kwargs):
        """Config with eigenvalue bounds computed from ``F`` directly.

        Uses a dense eigensolver, so intended for desk-scale inputs.
        """
        lo, hi = eigen_bounds(gram(F))
        return cls(lambda_min=lo, lambda_max=hi, **kwargs)


def eigen_bounds(M: SparseSym):
    """Extreme eigenvalues of ``M`` (dense for ``n <= 2000``)."""
    if M.n <= 2000:
        ev = np.linalg.eigvalsh(M.toarray())
        lo, hi = float(ev[0]), float(ev[-1])
    else:
        import scipy.sparse.linalg as spla

        hi = float(spla.eigsh(M.matrix, k=1, which="LA", return_eigenvectors=False)[0])
        lo = float(spla.eigsh(M.matrix, k=1, sigma=0, which="LM",
                              return_eigenvectors=False)[0])
    if lo <= 0:
        raise ValueError(f"matrix is not positive definite (lambda_min = {lo:.3e})")
    return lo, hi


def make_solver(kind="iterative", max_iters=20_000):
    """Inner solver ``(M, b, eps) -> x`` for dominant subsystems."""
    if kind == "direct":
        return lambda M, b, eps: solve_direct(M, b)

    def solve(M, b, eps):
        return solve_approx(M, b, SolveConfig(eps=min(eps, 0.5), max_iters=max_iters))

    return solve


# -- scaling loop ------------------------------------------------------------

@dataclass(frozen=True)
class ScalingState:
    """Current scaling ``D`` and the rows of ``D M D`` kept in the top block."""

    D: DiagMatrix
    dominated: np.ndarray

    @property
    def top(self):
        return np.flatnonzero(self.dominated)

    @property
    def bottom(self):
        return np.flatnonzero(~self.dominated)

    @property
    def fraction(self):
        return float(self.dominated.mean()) if self.dominated.size else 1.0


@dataclass(frozen=True)
class ScalingResult:
    D: DiagMatrix
    iterations: int
    fractions: list = field(default_factory=list)


def _check_mmatrix_factor(F: TwoNnzFactor):
    M = gram(F)
    off = M.matrix - sp.diags(M.diagonal())
    if off.nnz and off.max() > 1e-12 * abs(M.matrix).max():
        raise ValueError("factor does not yield an M-matrix (positive off-diagonal)")
    return M


def estimate_schur_diagonals(A1, A2, D1, k, rng, eps1, solver):
    """JL estimates of the Schur-complement diagonal on the rows of ``A2``.

    ``A1`` and ``A2`` are the top and bottom row blocks of the factor and
    ``D1`` scales the top block. Returns ``sigma`` with
    ``sigma_i = ||(R - Q D1 A1) a_i^T||^2`` for a ``k x m`` Gaussian ``R``;
    its expectation is ``k`` times the Schur diagonal.
    """
    A1 = sp.csr_matrix(A1)
    A2 = sp.csr_matrix(A2)
    m = A2.shape[1]
    R = rng.standard_normal((k, m))
    if A1.shape[0]:
        d1 = D1.d if isinstance(D1, DiagMatrix) else np.asarray(D1, dtype=float)
        B = sp.diags(d1) @ A1                  # D1 A1
        M11 = SparseSym((B @ B.T).tocsc(), check=False)
        rhs = (B @ R.T).T                      # rows: D1 A1 r_i^T
        Q = np.vstack([solver(M11, rhs[i], eps1) for i in range(k)])
        R = R - (B.T @ Q.T).T                  # R - Q D1 A1
    P = (A2 @ R.T)                             # rows: ((R - QD1A1) a_i^T)^T
    sigma = np.einsum("ij,ij->i", P, P)
    if np.any(sigma <= 0):
        raise InconsistencyError("Schur diagonal estimate is not positive")
    return DiagMatrix(sigma)


def scaling_iteration(F: TwoNnzFactor, state: ScalingState, cfg: MMatrixConfig,
                      rng, solver=None, M: SparseSym | None = None):
    """One round of the rescaling loop; returns the next state.

    Rows already in the top block stay there. ``M`` may be passed to avoid
    recomputing ``A A^T``.
    """
    solver = solver or make_solver(cfg.solver)
    M = gram(F) if M is None else M
    n, m = F.n, F.m
    k, delta, eps1, eps2 = cfg.resolve(n, m)
    top, bot = state.top, state.bottom
    if bot.size == 0:
        return state
    A = F.matrix.tocsr()
    A1, A2 = A[top], A[bot]
    D1 = state.D.d[top]
    sigma = estimate_schur_diagonals(A1, A2, D1, k, rng, eps1, solver).d / k
    d2 = rng.uniform(0.0, 1.0, size=bot.size)
    d2 = np.where(d2 > 0, d2, np.finfo(float).tiny)
    d2 = d2 / np.sqrt(sigma)
    d = np.empty(n)
    d[bot] = d2
    if top.size:
        B = sp.diags(D1) @ A1
        M11 = SparseSym((B @ B.T).tocsc(), check=False)
        M12 = M.submatrix(top, bot)
        rhs = D1 * (-(M12 @ d2) + delta)
        d1 = D1 * solver(M11, rhs, eps2)
        if np.any(d1 <= 0):
            raise InconsistencyError(
                f"rescaled top block has non-positive entry (min {d1.min():.3e})"
            )
        d[top] = d1
    D = DiagMatrix(d)
    dominated = state.dominated | dominated_rows(M.scaled(d))
    return ScalingState(D=D, dominated=dominated)


def find_dd_scaling(F: TwoNnzFactor, cfg: MMatrixConfig, rng, solver=None):
    """Positive diagonal ``D`` with ``D M D`` diagonally dominant.

    Returns a :class:`ScalingResult`; raises :class:`ScalingError` after
    ``cfg.max_outer_iters`` rounds.
    """
    M = _check_mmatrix_factor(F)
    solver = solver or make_solver(cfg.solver)
    state = ScalingState(D=DiagMatrix.identity(F.n), dominated=dominated_rows(M))
    fractions = [state.fraction]
    best = state.fraction
    it = 0
    while not is_dd(M.scaled(state.D.d)):
        if it >= cfg.max_outer_iters:
            raise ScalingError(
                f"no dominant scaling after {it} iterations "
                f"(best dominated fraction {best:.3f})",
                best_fraction=best, iterations=it,
            )
        state = scaling_iteration(F, state, cfg, rng, solver, M=M)
        it += 1
        fractions.append(state.fraction)
        best = max(best, state.fraction)
    return ScalingResult(D=state.D, iterations=it, fractions=fractions)


class MMatrixSolver:
    """Solver bound to one factor; the scaling is found once and reused."""

    def __init__(self, F: TwoNnzFactor, cfg: MMatrixConfig | None = None,
                 rng=None, solver=None):
        self.F = F
        self.cfg = MMatrixConfig.for_factor(F) if cfg is None else cfg
        self.rng = np.random.default_rng() if rng is None else rng
        self.solver = solver or make_solver(self.cfg.solver)
        self._scaling = None
        self._DMD = None

    @property
    def scaling(self) -> ScalingResult:
        if self._scaling is None:
            self._scaling = find_dd_scaling(self.F, self.cfg, self.rng, self.solver)
            self._DMD = gram(self.F).scaled(self._scaling.D.d)
        return self._scaling

    def solve(self, b, eps):
        b = np.asarray(b, dtype=float)
        if b.shape != (self.F.n,):
            raise ValueError(f"dimension mismatch: n = {self.F.n}, b has shape {b.shape}")
        if not 0 < eps < 1:
            raise ValueError("eps must lie in (0, 1)")
        if not np.any(b):
            return np.zeros_like(b)
        if self.F.n == 1:
            return b / gram(self.F).diagonal()
        d = self.scaling.D.d
        return d * self.solver(self._DMD, d * b, eps)


def mmatrix_solve(F: TwoNnzFactor, b, eps, cfg: MMatrixConfig | None = None,
                  rng=None, solver=None):
    """Approximate ``(A A^T)^{-1} b`` in the matrix norm."""
    return MMatrixSolver(F, cfg, rng, solver).solve(b, eps)


# -- random scaling statistics -----------------------------------------------

def random_scaling_trial(M: SparseSym, r, zeta, rng):
    """Fraction of rows ``i`` with ``(M D 1)_i >= r m_ii`` for a random
    uniform ``D``.

    ``zeta`` does not enter the draw; it only fixes which diagonals count as
    small when the result is compared with :func:`scaling_trial_bound`.
    """
    if not 0 <= r <= 0.25:
        raise ValueError("r must lie in [0, 1/4]")
    if not 0 < zeta <= 1:
        raise ValueError("zeta must lie in (0, 1]")
    d = rng.uniform(0.0, 1.0, size=M.n)
    rows = M.matrix @ d
    return float(np.mean(rows >= r * M.diagonal()))


def small_diagonal_fraction(M: SparseSym, zeta):
    """Fraction of diagonal entries below ``zeta`` times their average."""
    diag = M.diagonal()
    return float(np.mean(diag < zeta * diag.mean()))


def scaling_trial_bound(M: SparseSym, r, zeta):
    """``(threshold_fraction, probability)`` guaranteed for a random uniform scaling."""
    beta = small_diagonal_fraction(M, zeta)
    frac = (1 / 8 - r / 2) * (1 - beta - 2 / (3 * zeta))
    prob = (1 - 4 * r) / (4 * r + 7)
    return frac, prob


# -- augmented two-block systems ----------------------------------------------

@dataclass(frozen=True)
class AugSystem:
    """``M + v v^T`` with ``M = [[A D1^2 A^T + D2^2, A D1^2], [D1^2 A^T, D1^2 + D3^2]]``.

    ``A`` is ``n x m`` with off-diagonal-nonpositive gram; ``D1``, ``D3``
    have length ``m`` and ``D2`` length ``n``; ``v`` has length ``n + m``.
    """

    A: sp.csc_matrix
    D1: DiagMatrix
    D2: DiagMatrix
    D3: DiagMatrix
    v: np.ndarray

    def __post_init__(self):
        A = sp.csc_matrix(self.A, dtype=float)
        object.__setattr__(self, "A", A)
        for name in ("D1", "D2", "D3"):
            val = getattr(self, name)
            if not isinstance(val, DiagMatrix):
                object.__setattr__(self, name, DiagMatrix(val))
        n, m = A.shape
        if self.D1.n != m or self.D3.n != m or self.D2.n != n:
            raise ValueError("diagonal sizes do not match the 2-block layout")
        v = np.asarray(self.v, dtype=float).ravel()
        if v.shape != (n + m,):
            raise ValueError(f"v must have length {n + m}")
        object.__setattr__(self, "v", v)

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.A.shape[1]

    def assemble(self, with_v=True) -> np.ndarray:
        """Dense ``M`` (plus ``v v^T``); for tests and triage."""
        A = self.A.toarray()
        w1 = self.D1.d**2
        top = (A * w1) @ A.T + np.diag(self.D2.d**2)
        mat = np.block([[top, A * w1], [(A * w1).T, np.diag(w1 + self.D3.d**2)]])
        if with_v:
            mat += np.outer(self.v, self.v)
        return mat

    def schur_factor(self) -> TwoNnzFactor:
        """``A_S = [A D1 D3 (D1^2+D3^2)^{-1/2} | D2]`` with empty columns dropped."""
        d1, d3 = self.D1.d, self.D3.d
        scale = d1 * d3 / np.sqrt(d1**2 + d3**2)
        AS = (self.A @ sp.diags(scale)).tocsc()
        keep = np.diff(AS.indptr) > 0
        AS = sp.hstack([AS[:, keep], sp.diags(self.D2.d)], format="csc")
        return TwoNnzFactor(AS)

    def schur_bounds(self):
        """Eigenvalue bounds for ``A_S A_S^T``: ``min D2^2`` and a Gershgorin
        bound."""
        d1, d3 = self.D1.d, self.D3.d
        w = d1**2 * d3**2 / (d1**2 + d3**2)
        absA = abs(self.A)
        rows = absA @ (w * np.asarray(absA.sum(axis=0)).ravel()) + self.D2.d**2
        return float(self.D2.d.min() ** 2), float(max(rows.max(), self.D2.d.min() ** 2))

    def dump(self) -> str:
        """Plain-text dump of every block, one labelled section each."""
        coo = self.A.tocoo()
        lines = [f"# AugSystem n={self.n} m={self.m}", "[A]"]
        lines += [f"{i} {j} {v!r}" for i, j, v in zip(coo.row, coo.col, coo.data)]
        for name in ("D1", "D2", "D3"):
            lines.append(f"[{name}]")
            lines += [repr(x) for x in getattr(self, name).d]
        lines.append("[v]")
        lines += [repr(x) for x in self.v]
        return "\n".join(lines) + "\n"


class _SchurSolve:
    """Solves ``M x = b`` for the block matrix of an AugSystem."""

    def __init__(self, sys: AugSystem, inner, cfg, rng):
        self.sys = sys
        d1sq = sys.D1.d**2
        self.w1 = d1sq
        self.w2 = d1sq + sys.D3.d**2
        self.A = sys.A
        self.inner = inner
        if sys.n == 0:
            self._solve = None
        elif inner == "direct":
            AS = sys.schur_factor().matrix
            MS = (AS @ AS.T).toarray()
            self._solve = lambda b, eps: solve_direct(MS, b)
        else:
            F = sys.schur_factor()
            if cfg is None:
                lo, hi = sys.schur_bounds()
                cfg = MMatrixConfig(lambda_min=lo, lambda_max=hi)
            self._solve = MMatrixSolver(F, cfg, rng).solve

    def __call__(self, b, eps):
        n = self.sys.n
        b1, b2 = b[:n], b[n:]
        if n:
            rhs = b1 - self.A @ (self.w1 * b2 / self.w2)
            y1 = self._solve(rhs, eps) if np.any(rhs) else np.zeros(n)
            y2 = (b2 - self.w1 * (self.A.T @ y1)) / self.w2
        else:
            y1 = np.zeros(0)
            y2 = b2 / self.w2
        return np.concatenate([y1, y2])


def solve_augmented(sys: AugSystem, b, eps, cfg: MMatrixConfig | None = None,
                    rng=None, inner="mmatrix"):
    """Approximate ``(M + v v^T)^{-1} b`` for an :class:`AugSystem`.

    ``inner`` selects how the Schur complement ``A_S A_S^T`` is solved:
    ``"mmatrix"`` uses :class:`MMatrixSolver`, ``"direct"`` a Cholesky
    factorization. With ``v = 0`` the rank-one step is skipped.
    """
    b = np.asarray(b, dtype=float)
    if b.shape != (sys.n + sys.m,):
        raise ValueError(f"b must have length {sys.n + sys.m}")
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    if inner not in ("mmatrix", "direct"):
        raise ValueError(f"unknown inner solver {inner!r}")
    solve = _SchurSolve(sys, inner, cfg, rng)
    v = sys.v
    if not np.any(v):
        return solve(b, eps)
    # The tolerances depend on v^T M^{-1} v; estimate it from a first solve.
    eps2 = min(0.5, eps / 14)
    z = solve(v, eps2)
    inflate = 1 + 2 * max(float(v @ z), 0.0)
    eps1 = (eps / 2) / inflate
    eps2_new = min(0.5, (eps / 14) / inflate)
    if eps2_new < eps2 and inner != "direct":
        z = solve(v, eps2_new)
    y = solve(b, eps1)
    denom = 1.0 + float(v @ z)
    if denom <= 1e-12:
        raise RankOneBreakdown(f"1 + v^T z = {denom:.3e}")
    return y - z * (float(z @ b) / denom)
