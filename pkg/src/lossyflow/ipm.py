"""Short-step dual path-following interior-point method.

Solves ``min c^T x  s.t.  A x = b, x >= 0`` through its dual
``max b^T y  s.t.  A^T y <= c`` using only approximate solves of systems
``(A S^{-2} A^T + v v^T) x = r``. Every solve goes through a backend
object, so the same driver runs on dense factorizations, conjugate
gradients, or the structured flow solver.

The method keeps a lower bound ``z`` on the optimum and the gap slack
``s_gap = b^T y - z``. Counted ``m`` times, the gap slack turns the dual
into an analytic-center problem for the matrix ``[A | -b 1^T]``.

* :func:`find_central_path` starts from ``y0``. It walks backwards along
  the path of an auxiliary right-hand side ``b_hat`` until the gap is
  large enough to switch to ``b``.
* :func:`shift` raises ``z`` and recenters with one Newton step.
* :func:`extract_primal` turns the final dual state into a primal point.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .linalg import ConvergenceError, pcg, solve_direct

__all__ = [
    "CanonicalLP",
    "DualState",
    "IpmConfig",
    "IpmResult",
    "IpmError",
    "StepRejected",
    "IterationLimit",
    "ExtractionError",
    "DirectBackend",
    "IterativeBackend",
    "eta_exact",
    "eta_augmented",
    "augmented_matrix",
    "analytic_center",
    "newton_step",
    "shift",
    "unshift",
    "find_central_path",
    "extract_primal",
    "interior_point",
    "iteration_cap",
    "TraceWriter",
]


class IpmError(RuntimeError):
    """Base class for driver failures; ``trace`` holds the recent events."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])


class StepRejected(IpmError):
    """A Newton step produced a non-positive slack."""


class IterationLimit(IpmError):
    """Shift or unshift loop exceeded its cap."""


class ExtractionError(IpmError):
    """The primal point could not be recovered from the final state."""


# -- problem and state -------------------------------------------------------

@dataclass(frozen=True)
class CanonicalLP:
    """``min c^T x, A x = b, x >= 0`` with the data the method needs.

    ``T`` bounds every coordinate of every feasible dual point,
    ``lambda_min`` bounds the smallest eigenvalue of ``A A^T`` from below,
    and ``y0`` is strictly interior (``c - A^T y0 > 0``).
    """

    A: sp.csr_matrix
    b: np.ndarray
    c: np.ndarray
    T: float
    lambda_min: float
    y0: np.ndarray

    def __post_init__(self):
        A = sp.csr_matrix(self.A, dtype=float)
        object.__setattr__(self, "A", A)
        n, m = A.shape
        for name, size in (("b", n), ("c", m), ("y0", n)):
            arr = np.asarray(getattr(self, name), dtype=float).ravel()
            if arr.shape != (size,):
                raise ValueError(f"{name} has length {arr.size}, expected {size}")
            object.__setattr__(self, name, arr)
        if not self.T > 0:
            raise ValueError("T must be > 0")
        if not self.lambda_min > 0:
            raise ValueError("lambda_min must be > 0")
        if np.any(self.s0 <= 0):
            raise ValueError("y0 is not strictly interior: c - A^T y0 has non-positive entries")

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.A.shape[1]

    @property
    def s0(self):
        return self.c - self.A.T @ self.y0

    @property
    def U(self):
        vals = [np.abs(self.A.data).max() if self.A.nnz else 0.0,
                np.abs(self.b).max(initial=0.0), np.abs(self.c).max(initial=0.0)]
        return float(max(max(vals), 1.0))

    def check_gram(self):
        """Raise unless ``A A^T`` is numerically positive definite (dense)."""
        ev = np.linalg.eigvalsh((self.A @ self.A.T).toarray())
        if ev.size and ev[0] <= 1e-12 * max(ev[-1], 1.0):
            raise ValueError("A A^T is singular")
        return ev


@dataclass(frozen=True)
class DualState:
    """Interior dual point ``y`` with slacks ``s = c - A^T y``, gap slack
    ``s_gap = b^T y - z`` and current lower bound ``z``."""

    y: np.ndarray
    s: np.ndarray
    s_gap: float
    z: float

    def __post_init__(self):
        if not np.all(self.s > 0):
            raise StepRejected(f"slack not positive (min {np.min(self.s):.3e})")
        if not self.s_gap > 0:
            raise StepRejected(f"gap slack not positive ({self.s_gap:.3e})")

    def residuals(self, A, b, c):
        """Drift of the tracked slacks from their defining formulas."""
        return (float(np.max(np.abs(self.s - (c - A.T @ self.y)), initial=0.0)),
                abs(self.s_gap - (b @ self.y - self.z)))


@dataclass(frozen=True)
class IpmConfig:
    epsilon: float = 1e-3
    max_shift_iters: int | None = None
    max_unshift_iters: int | None = None
    eps3_override: float | None = None
    eps4_override: float | None = None

    def __post_init__(self):
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must lie in (0, 1)")
        for name in ("max_shift_iters", "max_unshift_iters"):
            val = getattr(self, name)
            if val is not None and val < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass(frozen=True)
class IpmResult:
    x: np.ndarray
    state: DualState
    unshift_iters: int
    shift_iters: int
    solves: int
    trace: list = field(default_factory=list, repr=False)

    @property
    def iterations(self):
        return {"unshift": self.unshift_iters, "shift": self.shift_iters,
                "solves": self.solves}


def iteration_cap(lp: CanonicalLP, epsilon):
    """``ceil(40 sqrt(m) log(T U m / (lambda_min s0_min eps)))``."""
    ratio = lp.T * lp.U * lp.m / (lp.lambda_min * lp.s0.min() * epsilon)
    return int(math.ceil(40 * math.sqrt(lp.m) * max(math.log(ratio), 1.0)))


# -- backends ----------------------------------------------------------------

class _Backend:
    """Shared bookkeeping: call counts and last inner iteration count."""

    def __init__(self, A):
        self.A = sp.csr_matrix(A, dtype=float)
        self.calls = 0
        self.last_iters = 0

    def __call__(self, s, v, rhs, tol):
        self.calls += 1
        return self.solve(s, v, rhs, tol)


class DirectBackend(_Backend):
    """Assembles ``A S^{-2} A^T + v v^T`` and factors it."""

    def __init__(self, A, dense_limit=4_000_000):
        super().__init__(A)
        n, m = self.A.shape
        self._dense = self.A.toarray() if n * m <= dense_limit else None

    def solve(self, s, v, rhs, tol):
        w = 1.0 / (s * s)
        if self._dense is not None:
            M = (self._dense * w) @ self._dense.T
        else:
            M = (self.A @ sp.diags(w) @ self.A.T).toarray()
        if v is not None:
            M += np.outer(v, v)
        self.last_iters = 1
        return solve_direct(M, rhs, robust=True)


class IterativeBackend(_Backend):
    """Jacobi-preconditioned conjugate gradients on the implicit operator.

    The residual target is ``tol * rtol_factor`` floored at ``rtol_floor``.
    """

    def __init__(self, A, max_iters=50_000, rtol_factor=1e-2, rtol_floor=1e-13):
        super().__init__(A)
        self.AT = self.A.T.tocsr()
        self.Asq = self.A.multiply(self.A).tocsr()
        self.max_iters = max_iters
        self.rtol_factor = rtol_factor
        self.rtol_floor = rtol_floor

    def solve(self, s, v, rhs, tol):
        w = 1.0 / (s * s)
        A, AT = self.A, self.AT
        diag = self.Asq @ w
        if v is not None:
            diag = diag + v * v
            matvec = lambda x: A @ (w * (AT @ x)) + v * (v @ x)
        else:
            matvec = lambda x: A @ (w * (AT @ x))
        inv = 1.0 / diag
        rtol = max(tol * self.rtol_factor, self.rtol_floor)
        x, it, _ = pcg(matvec, rhs, lambda r: inv * r, rtol, self.max_iters)
        self.last_iters = it
        return x


# -- dense oracles (tests) ---------------------------------------------------

def eta_exact(A, s):
    """``||proj_{range(S^{-1} A^T)} 1||``, the Newton decrement at ``s``.

    Computed from a QR factorization of ``S^{-1} A^T``, which is stable
    even when ``A S^{-2} A^T`` is badly conditioned.
    """
    A = A.toarray() if sp.issparse(A) else np.asarray(A, dtype=float)
    s = np.asarray(s, dtype=float)
    if np.any(s <= 0):
        raise ValueError("eta_exact needs s > 0")
    B = A.T / s[:, None]
    Q, R = np.linalg.qr(B)
    rd = np.abs(np.diag(R))
    if rd.size and rd.min() <= 1e-14 * rd.max():
        raise np.linalg.LinAlgError("A S^{-2} A^T is singular")
    return float(np.linalg.norm(Q.T @ np.ones(len(s))))


def augmented_matrix(A, b, copies):
    """Dense ``[A | -b 1^T]`` with ``copies`` gap columns."""
    A = A.toarray() if sp.issparse(A) else np.asarray(A, dtype=float)
    return np.hstack([A, -np.repeat(np.asarray(b, float)[:, None], copies, axis=1)])


def eta_augmented(A, b, s, s_gap):
    """Newton decrement of the gap-augmented problem at ``(s, s_gap)``."""
    m = len(s)
    return eta_exact(augmented_matrix(A, b, m),
                     np.concatenate([s, np.full(m, s_gap)]))


def analytic_center(A, c, y0, tol=1e-14, max_iters=500):
    """Maximizer of ``sum log(c - A^T y)`` by damped Newton from ``y0``."""
    A = A.toarray() if sp.issparse(A) else np.asarray(A, dtype=float)
    y = np.array(y0, dtype=float)
    for _ in range(max_iters):
        s = c - A.T @ y
        g = A @ (1.0 / s)
        H = (A / s**2) @ A.T
        d = -np.linalg.solve(H, g)
        eta = math.sqrt(max(-(g @ d), 0.0))
        if eta < tol:
            return y
        y = y + (d if eta < 0.25 else d / (1 + eta))
    return y


# -- Newton steps --------------------------------------------------------------

def _eps3(columns):
    return 1.0 / (20.0 * (math.sqrt(columns) + 1.0))


def newton_step(A, c, y, backend, eps3=None):
    """One damped Newton step towards the analytic center of ``A^T y <= c``.

    Returns ``y + (1 - eps3) d`` with ``d`` an approximate solution of
    ``(A S^{-2} A^T) d = -A S^{-1} 1``, solved at tolerance ``eps3``.
    """
    A = sp.csr_matrix(A)
    m = A.shape[1]
    eps3 = _eps3(m) if eps3 is None else eps3
    s = c - A.T @ y
    if np.any(s <= 0):
        raise StepRejected("newton_step needs c - A^T y > 0")
    d = backend(s, None, -(A @ (1.0 / s)), eps3)
    y_new = y + (1.0 - eps3) * d
    s_new = c - A.T @ y_new
    if np.any(s_new <= 0):
        raise StepRejected(f"step left the interior (min slack {s_new.min():.3e})")
    return y_new


class _Path:
    """Cached pieces for Newton steps on ``[A | -b 1^T]``."""

    def __init__(self, A, b, c, backend, eps3=None):
        self.A = sp.csr_matrix(A)
        self.AT = self.A.T.tocsr()
        self.b = b
        self.c = c
        self.m = self.A.shape[1]
        self.backend = backend
        self.eps3 = _eps3(2 * self.m) if eps3 is None else eps3
        self.sqrt_m = math.sqrt(self.m)

    def step(self, state: DualState, z_new):
        """Newton step for lower bound ``z_new`` starting at ``state``."""
        m = self.m
        sg = state.s_gap + (state.z - z_new)
        if sg <= 0:
            raise StepRejected(f"gap slack {sg:.3e} not positive before step")
        s = state.s
        rhs = -(self.A @ (1.0 / s) - (m / sg) * self.b)
        v = (self.sqrt_m / sg) * self.b
        d = self.backend(s, v, rhs, self.eps3)
        y_new = state.y + (1.0 - self.eps3) * d
        # Recompute rather than accumulate: incremental slack updates drift
        # away from c - A^T y over thousands of steps.
        s_new = self.c - self.AT @ y_new
        sg_new = float(self.b @ y_new) - z_new
        if not (np.all(s_new > 0) and sg_new > 0):
            bad = min(float(s_new.min(initial=np.inf)), sg_new)
            raise StepRejected(f"step left the interior (min slack {bad:.3e})")
        return DualState(y=y_new, s=s_new, s_gap=sg_new, z=z_new)


def shift(lp: CanonicalLP, state: DualState, backend, eps3=None):
    """Raise ``z`` by ``s_gap / (10 sqrt(m))`` and recenter."""
    path = _Path(lp.A, lp.b, lp.c, backend, eps3)
    return path.step(state, state.z + state.s_gap / (10 * path.sqrt_m))


def unshift(lp_hat: CanonicalLP, state: DualState, backend, eps3=None):
    """Lower ``z_hat`` by ``s_gap / (10 sqrt(m))`` and recenter.

    ``lp_hat`` carries the auxiliary right-hand side ``b_hat``.
    """
    path = _Path(lp_hat.A, lp_hat.b, lp_hat.c, backend, eps3)
    return path.step(state, state.z - state.s_gap / (10 * path.sqrt_m))


# -- drivers -------------------------------------------------------------------

class _Tracer:
    def __init__(self, observer, keep=64):
        self.observer = observer
        self.keep = keep
        self.events = []

    def __call__(self, phase, it, state, backend, tol):
        event = {"phase": phase, "iter": it, "z": float(state.z),
                 "s_gap": float(state.s_gap), "tol": float(tol),
                 "backend_iters": int(getattr(backend, "last_iters", 0))}
        self.events.append(event)
        if len(self.events) > self.keep:
            del self.events[0]
        if self.observer is not None:
            self.observer(event, state)


def initial_state(lp: CanonicalLP):
    """``(lp_hat, state)`` at ``y0`` with ``b_hat = A S0^{-1} 1`` and
    ``s_gap = m``; this state is exactly central for ``b_hat``."""
    s0 = lp.s0
    b_hat = lp.A @ (1.0 / s0)
    lp_hat = replace(lp, b=b_hat)
    z_hat = float(b_hat @ lp.y0) - lp.m
    return lp_hat, DualState(y=lp.y0.copy(), s=s0, s_gap=float(lp.m), z=z_hat)


def find_central_path(lp: CanonicalLP, backend, cfg: IpmConfig | None = None,
                      observer=None, *, _tracer=None):
    """Near-central state on the path for ``b`` with a large gap slack.

    Follows the ``b_hat`` path backwards until
    ``s_gap >= 40 T m ||b_hat|| / sqrt(lambda_min)``. Then it sets
    ``z = b^T y - 40 T m ||b|| / sqrt(lambda_min)``. Returns
    ``(state, unshift_iterations)``.
    """
    cfg = IpmConfig() if cfg is None else cfg
    tracer = _tracer or _Tracer(observer)
    lp_hat, state = initial_state(lp)
    path = _Path(lp_hat.A, lp_hat.b, lp_hat.c, backend, cfg.eps3_override)
    cap = cfg.max_unshift_iters or iteration_cap(lp, cfg.epsilon)
    scale = 40.0 * lp.T * lp.m / math.sqrt(lp.lambda_min)
    target = scale * float(np.linalg.norm(lp_hat.b))
    it = 0
    while state.s_gap < target:
        if it >= cap:
            raise IterationLimit(f"unshift exceeded {cap} iterations", tracer.events)
        try:
            state = path.step(state, state.z - state.s_gap / (10 * path.sqrt_m))
        except (StepRejected, ConvergenceError, np.linalg.LinAlgError) as exc:
            raise StepRejected(f"unshift {it}: {exc}", tracer.events) from exc
        it += 1
        tracer("unshift", it, state, backend, path.eps3)
    gap = scale * float(np.linalg.norm(lp.b))
    if gap <= 0:
        raise IpmError("b = 0: every feasible point is optimal", tracer.events)
    z = float(lp.b @ state.y) - gap
    return DualState(y=state.y, s=state.s, s_gap=gap, z=z), it


def extract_primal(lp: CanonicalLP, state: DualState, backend, eps4=None):
    """Primal point ``x = x' / (m x'_gap)`` from a terminal dual state.

    ``x' = S^{-1} 1 - S^{-2} A^T v`` and
    ``x'_gap = 1/s_gap + (b^T v)/s_gap^2``, where ``v`` solves the
    augmented system with right-hand side ``A S^{-1} 1 - m b / s_gap``.
    """
    m, n = lp.m, lp.n
    s, sg = state.s, state.s_gap
    if eps4 is None:
        s_min = min(float(s.min()), sg)
        eps4 = min(0.5, s_min / (lp.T * lp.U) * math.sqrt(m) / n)
    rhs = lp.A @ (1.0 / s) - (m / sg) * lp.b
    v = backend(s, (math.sqrt(m) / sg) * lp.b, rhs, eps4)
    x_prime = 1.0 / s - (lp.A.T @ v) / (s * s)
    x_gap = 1.0 / sg + float(lp.b @ v) / (sg * sg)
    if not x_gap > 0:
        raise ExtractionError(f"x'_gap = {x_gap:.3e} is not positive")
    x = x_prime / (m * x_gap)
    if np.any(x <= 0):
        raise ExtractionError(f"primal point has non-positive entry ({x.min():.3e})")
    return x


def interior_point(lp: CanonicalLP, cfg: IpmConfig | None = None, backend=None,
                   observer=None):
    """Approximate primal optimum of ``lp`` within additive ``cfg.epsilon``.

    ``observer(event, state)`` is called after every unshift and shift.
    Returns an :class:`IpmResult`.
    """
    cfg = IpmConfig() if cfg is None else cfg
    backend = DirectBackend(lp.A) if backend is None else backend
    tracer = _Tracer(observer)
    start_calls = getattr(backend, "calls", 0)
    state, n_unshift = find_central_path(lp, backend, cfg, _tracer=tracer)
    tracer("center", 0, state, backend, 0.0)
    path = _Path(lp.A, lp.b, lp.c, backend, cfg.eps3_override)
    cap = cfg.max_shift_iters or iteration_cap(lp, cfg.epsilon)
    target = cfg.epsilon / 3
    it = 0
    while state.s_gap > target:
        if it >= cap:
            raise IterationLimit(f"shift exceeded {cap} iterations", tracer.events)
        try:
            state = path.step(state, state.z + state.s_gap / (10 * path.sqrt_m))
        except (StepRejected, ConvergenceError, np.linalg.LinAlgError) as exc:
            raise StepRejected(f"shift {it}: {exc}", tracer.events) from exc
        it += 1
        tracer("shift", it, state, backend, path.eps3)
    try:
        x = extract_primal(lp, state, backend, cfg.eps4_override)
    except (ConvergenceError, np.linalg.LinAlgError) as exc:
        raise ExtractionError(str(exc), tracer.events) from exc
    except ExtractionError as exc:
        exc.trace = list(tracer.events)
        raise
    solves = getattr(backend, "calls", 0) - start_calls
    return IpmResult(x=x, state=state, unshift_iters=n_unshift, shift_iters=it,
                     solves=solves, trace=list(tracer.events))


class TraceWriter:
    """Observer writing one JSON object per line to a text stream."""

    def __init__(self, stream):
        self.stream = stream

    def __call__(self, event, state):
        self.stream.write(json.dumps(event, sort_keys=True) + "\n")
