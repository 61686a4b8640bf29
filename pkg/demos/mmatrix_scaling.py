"""Rescale an M-matrix to diagonal dominance and solve with it.

Run with ``python3 demos/mmatrix_scaling.py``.
"""
import numpy as np

from lossyflow.linalg import TwoNnzFactor, dominated_rows, gram, is_dd, m_norm, solve_direct
from lossyflow.mmatrix import MMatrixConfig, MMatrixSolver

rng = np.random.default_rng(42)
n = 60

# A path with a few chords, one column per edge (a, -b), plus two singleton
# columns so that A A^T is definite. Uneven row scales break dominance.
cols = [[(i, 1.0), (i + 1, -rng.uniform(0.5, 1.5))] for i in range(n - 1)]
for _ in range(n):
    i, j = rng.choice(n, 2, replace=False)
    cols.append([(i, rng.uniform(0.1, 1.0)), (j, -rng.uniform(0.1, 1.0))])
cols += [[(0, 1.0)], [(n - 1, 1.0)]]
F = TwoNnzFactor.from_columns(n, cols).scale_rows(10.0 ** rng.uniform(-1.5, 1.5, n))
M = gram(F)
print(f"M = A A^T, n={n}; diagonally dominant: {is_dd(M)} "
      f"({dominated_rows(M).sum()} of {n} rows dominant)")

cfg = MMatrixConfig.for_factor(F)
k, delta, eps1, eps2 = cfg.resolve(F.n, F.m)
print(f"eigenvalue bounds [{cfg.lambda_min:.3g}, {cfg.lambda_max:.3g}]; "
      f"k={k}, delta={delta:.2e}, eps1={eps1:.0e}, eps2={eps2:.0e}")

solver = MMatrixSolver(F, cfg, rng)
res = solver.scaling
print(f"scaling found in {res.iterations} rounds; dominated fraction per round:",
      [round(f, 2) for f in res.fractions])
print(f"D M D diagonally dominant: {is_dd(M.scaled(res.D.d))}")

b = rng.standard_normal(n)
ref = solve_direct(M, b)
for eps in (1e-2, 1e-6, 1e-10):
    x = solver.solve(b, eps)
    rel = m_norm(M, x - ref) / m_norm(M, ref)
    print(f"eps={eps:.0e}: relative error in the M-norm {rel:.2e}")
