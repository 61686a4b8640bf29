"""Seeded random instances shared by the test modules."""
import numpy as np
import scipy.sparse as sp

from lossyflow.genflow import FlowNetwork
from lossyflow.ipm import CanonicalLP
from lossyflow.linalg import SparseSym, TwoNnzFactor


def random_sdd(rng, n, density=0.1, slack=0.1):
    """Symmetric diagonally dominant matrix with mixed-sign off-diagonals."""
    R = sp.random(n, n, density=density, random_state=rng, data_rvs=rng.standard_normal)
    off = sp.triu(R, k=1)
    off = off + off.T
    rowsum = np.asarray(abs(off).sum(axis=1)).ravel()
    diag = rowsum + slack + rng.uniform(0, 1, n)
    return SparseSym((off + sp.diags(diag)).tocsc())


def random_factor(rng, n, extra=2, scale_spread=0.0):
    """Two-nonzero factor of a connected M-matrix.

    Edge columns ``(a, -b)`` with ``a, b > 0`` give nonpositive
    off-diagonals; a few single-entry columns make ``A A^T`` definite.
    Rows are rescaled by ``10**U(-spread, spread)``, which keeps the
    M-matrix property but usually destroys diagonal dominance.
    """
    cols = []
    perm = rng.permutation(n)
    for k in range(1, n):           # random spanning tree
        i, j = perm[k], perm[rng.integers(0, k)]
        cols.append([(i, rng.uniform(0.5, 2.0)), (j, -rng.uniform(0.5, 2.0))])
    for _ in range(extra * n):
        i, j = rng.choice(n, 2, replace=False)
        cols.append([(i, rng.uniform(0.1, 2.0)), (j, -rng.uniform(0.1, 2.0))])
    for i in rng.choice(n, max(1, n // 8), replace=False):
        cols.append([(i, rng.uniform(0.5, 2.0))])
    F = TwoNnzFactor.from_columns(n, cols)
    if scale_spread:
        F = F.scale_rows(10.0 ** rng.uniform(-scale_spread, scale_spread, n))
    return F


def bounded_lp(rng, n, m):
    """LP family ``A = [I, -I, G]`` with ``c > 0``.

    The identity blocks bound every dual coordinate by ``max c`` and give
    ``A A^T >= 2 I``; ``y0 = 0`` is interior.
    """
    G = rng.uniform(-1, 1, (n, m - 2 * n))
    A = np.hstack([np.eye(n), -np.eye(n), G])
    c = rng.uniform(1, 2, m)
    b = rng.uniform(-1, 1, n)
    return CanonicalLP(A=sp.csr_matrix(A), b=b, c=c, T=float(c.max()),
                       lambda_min=2.0, y0=np.zeros(n))


def lossy_net(rng, n, m, U, costs=False):
    """Random lossy network on ``0..n-1`` with ``s = 0`` and ``t = n - 1``."""
    edges = []
    while len(edges) < m:
        u, w = (int(x) for x in rng.choice(n, 2, replace=False))
        if w == 0 or u == n - 1:
            continue
        den = int(rng.integers(1, U + 1))
        num = int(rng.integers(1, den + 1))
        e = (u, w, int(rng.integers(1, U + 1)), num, den)
        if costs:
            e += (int(rng.integers(1, U + 1)),)
        edges.append(e)
    return FlowNetwork.from_edges(n, edges, 0, n - 1)


def standard_net(rng, n, m, U):
    """Random network with ``gamma = 1`` and costs; the first three edges
    leave ``s`` so that most instances carry flow."""
    edges = []
    while len(edges) < m:
        u, w = (int(x) for x in rng.choice(n, 2, replace=False))
        if len(edges) < 3:
            u = 0
        if u == w or w == 0 or u == n - 1:
            continue
        edges.append((u, w, int(rng.integers(1, U + 1)), 1, 1, int(rng.integers(1, U + 1))))
    return FlowNetwork.from_edges(n, edges, 0, n - 1)


def near_central(rng, lp, eta_max=0.1):
    """Dual point of ``lp`` whose Newton decrement is below ``eta_max``.

    Starts from the analytic center and moves along a random direction,
    halving the step until the decrement drops under a random target.
    """
    from lossyflow.ipm import analytic_center, eta_exact

    y_star = analytic_center(lp.A, lp.c, lp.y0)
    target = rng.uniform(0.0, eta_max)
    d = rng.standard_normal(lp.n)
    s = lp.c - lp.A.T @ y_star
    d *= 0.5 * s.min() / max(np.abs(lp.A.T @ d).max(), 1e-300)
    for _ in range(200):
        y = y_star + d
        s = lp.c - lp.A.T @ y
        if np.all(s > 0) and eta_exact(lp.A, s) <= target:
            return y
        d *= 0.5
    return y_star
