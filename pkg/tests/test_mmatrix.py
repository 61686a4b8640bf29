import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from generators import random_factor
from lossyflow.linalg import (
    DiagMatrix,
    SparseSym,
    TwoNnzFactor,
    gram,
    is_dd,
    m_norm,
    solve_direct,
)
from lossyflow.mmatrix import (
    AugSystem,
    MMatrixConfig,
    MMatrixSolver,
    ScalingError,
    ScalingState,
    estimate_schur_diagonals,
    find_dd_scaling,
    jl_bound,
    k_jl,
    make_solver,
    mmatrix_solve,
    random_scaling_trial,
    scaling_iteration,
    scaling_trial_bound,
    small_diagonal_fraction,
    solve_augmented,
)

# A A^T = [[2, -10], [-10, 200]]
HARD2 = TwoNnzFactor.from_columns(2, [[(0, 1.0), (1, -10.0)], [(0, 1.0)], [(1, 10.0)]])
# A A^T = [[2, -1], [-1, 2]]
LAP2 = TwoNnzFactor.from_columns(2, [[(0, 1.0), (1, -1.0)], [(0, 1.0)], [(1, 1.0)]])


def _literal_bound(k, alpha, beta, gamma):
    """The projection bound written out term by term, in plain floats."""
    g = gamma - 2 / (k - 2)
    return (1 - 2 / (2 + (k - 4) * (1 - 2 / k) ** 2 * g * g)
            - 2 / (beta * (2 + (alpha / (1 - alpha)) ** 2 * k)))


def _scan_k(alpha, beta, gamma, p):
    k = 5
    while not (gamma > 2 / (k - 2) and _literal_bound(k, alpha, beta, gamma) >= p):
        k += 1
    return k


def _dense_schur(M, top, bot):
    M = M.toarray() if hasattr(M, "toarray") else M
    if len(top) == 0:
        return M[np.ix_(bot, bot)]
    M11 = M[np.ix_(top, top)]
    M12 = M[np.ix_(top, bot)]
    return M[np.ix_(bot, bot)] - M12.T @ np.linalg.solve(M11, M12)


# -- k_jl ----------------------------------------------------------------------

@pytest.mark.parametrize("args", [(1 / 100, 1 / 5, 1 / 100, 1 / 3), (0.1, 0.2, 0.1, 0.3),
                                  (0.3, 0.5, 0.5, 0.1)])
def test_k_jl_matches_linear_scan(args):
    assert k_jl(*args) == _scan_k(*args)


def test_k_jl_paper_tuple_frozen():
    assert k_jl(1 / 100, 1 / 5, 1 / 100, 1 / 3) == 157415


def test_k_jl_small_p_returns_first_valid_k():
    alpha, beta, gamma = 0.3, 0.5, 0.5
    k = k_jl(alpha, beta, gamma, 1e-9)
    assert k >= 5 and gamma > 2 / (k - 2)
    assert gamma <= 2 / (k - 3) or _literal_bound(k - 1, alpha, beta, gamma) < 1e-9


def test_k_jl_validation_and_overflow():
    with pytest.raises(ValueError):
        k_jl(0.0, 0.2, 0.1, 0.5)
    with pytest.raises(ValueError):
        k_jl(0.1, 0.2, 0.1, 1.0)
    with pytest.raises(OverflowError):
        k_jl(1e-7, 1e-3, 1e-7, 0.999)


def test_jl_bound_undefined_below_threshold():
    assert jl_bound(6, 0.1, 0.2, 0.1) == -np.inf


@settings(max_examples=40, deadline=None)
@given(alpha=st.floats(0.05, 0.5), beta=st.floats(0.05, 0.9), gamma=st.floats(0.05, 0.9),
       p1=st.floats(0.01, 0.9), p2=st.floats(0.01, 0.9))
def test_k_jl_monotone_in_p(alpha, beta, gamma, p1, p2):
    lo, hi = sorted((p1, p2))
    assert k_jl(alpha, beta, gamma, lo) <= k_jl(alpha, beta, gamma, hi)


# -- config ------------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError):
        MMatrixConfig(lambda_min=2.0, lambda_max=1.0)
    with pytest.raises(ValueError):
        MMatrixConfig(lambda_min=1.0, lambda_max=2.0, k=3)
    with pytest.raises(ValueError):
        MMatrixConfig(lambda_min=1.0, lambda_max=2.0, eps1=0.0)
    with pytest.raises(ValueError):
        MMatrixConfig(lambda_min=1.0, lambda_max=2.0, mode="fast")


def test_config_resolve_modes():
    lo, hi, n, m = 0.5, 8.0, 10, 30
    kappa = hi / lo
    delta = math.sqrt(lo) / (24 * math.sqrt(kappa) * n)
    prac = MMatrixConfig(lambda_min=lo, lambda_max=hi).resolve(n, m)
    assert prac == pytest.approx((32, delta, 1e-8, 1e-8), rel=1e-15)
    exact = MMatrixConfig(lambda_min=lo, lambda_max=hi, mode="paper_exact").resolve(n, m)
    assert exact[0] == 157415
    assert exact[1] == pytest.approx(delta, rel=1e-15)
    assert exact[2] == pytest.approx(0.005 / math.sqrt(1.01 * kappa * m * n), rel=1e-15)
    assert exact[3] == pytest.approx(1 / (72 * kappa**2.5 * n**2), rel=1e-15)


# -- Schur diagonal estimates ------------------------------------------------

def test_estimate_empty_top_is_pure_projection():
    rng = np.random.default_rng(0)
    F = random_factor(rng, 12)
    A = F.matrix.tocsr()
    empty = A[[]]
    sigma = estimate_schur_diagonals(empty, A, np.zeros(0), 16,
                                     np.random.default_rng(5), 1e-8, make_solver("direct"))
    R = np.random.default_rng(5).standard_normal((16, F.m))
    np.testing.assert_allclose(sigma.d, ((A @ R.T) ** 2).sum(axis=1), rtol=1e-12)


def test_estimate_is_deterministic_given_seed():
    rng = np.random.default_rng(1)
    F = random_factor(rng, 20)
    A = F.matrix.tocsr()
    top, bot = np.arange(8), np.arange(8, 20)
    D1 = rng.uniform(0.5, 2.0, 8)
    runs = [estimate_schur_diagonals(A[top], A[bot], D1, 8, np.random.default_rng(9), 1e-8,
                                     make_solver()).d for _ in range(2)]
    np.testing.assert_array_equal(runs[0], runs[1])


def test_estimate_concentrates_on_schur_diagonal():
    rng = np.random.default_rng(2)
    F = random_factor(rng, 16)
    A = F.matrix.tocsr()
    top, bot = np.arange(6), np.arange(6, 16)
    D1 = rng.uniform(0.5, 2.0, 6)
    k = 4000
    sigma = estimate_schur_diagonals(A[top], A[bot], D1, k, np.random.default_rng(3), 1e-12,
                                     make_solver("direct")).d
    # The D1 scaling of the top block leaves the Schur complement unchanged.
    ref = np.diag(_dense_schur(gram(F), top, bot))
    # chi-square with k degrees of freedom: relative sd sqrt(2/k) ~ 0.022
    np.testing.assert_allclose(sigma / k, ref, rtol=0.12)


def test_jl_conclusions_with_worst_case_k():
    """Both projection guarantees hold for k from the worst-case tuple."""
    alpha, beta, gamma, p = 1 / 100, 1 / 5, 1 / 100, 1 / 3
    k = k_jl(alpha, beta, gamma, p)
    rng = np.random.default_rng(4)
    F = random_factor(rng, 20, extra=1)
    A = F.matrix.tocsr()
    diag = gram(F).diagonal()
    trials, ok = 12, 0
    for t in range(trials):
        sigma = estimate_schur_diagonals(A[[]], A, np.zeros(0), k, np.random.default_rng(t),
                                         1e-8, make_solver("direct")).d
        ratio = sigma / (k * diag)
        ok += ratio.mean() <= 1 + gamma and np.sum(ratio < 1 - alpha) <= beta * F.n
    sd = math.sqrt(p * (1 - p) / trials)
    assert ok / trials >= p - 3 * sd


def test_schur_diagonals_within_eigen_bounds():
    rng = np.random.default_rng(5)
    for _ in range(10):
        F = random_factor(rng, int(rng.integers(5, 30)), scale_spread=1.0)
        M = gram(F)
        ev = np.linalg.eigvalsh(M.toarray())
        top = np.flatnonzero(rng.uniform(size=F.n) < 0.5)
        bot = np.setdiff1d(np.arange(F.n), top)
        if bot.size == 0:
            continue
        S = np.diag(_dense_schur(M, top, bot))
        assert np.all(S >= ev[0] * (1 - 1e-10)) and np.all(S <= ev[-1] * (1 + 1e-10))


# -- scaling loop ------------------------------------------------------------------

def test_find_dd_scaling_already_dominant():
    res = find_dd_scaling(LAP2, MMatrixConfig.for_factor(LAP2), np.random.default_rng(0))
    assert res.iterations == 0
    np.testing.assert_array_equal(res.D.d, [1.0, 1.0])


def test_find_dd_scaling_two_by_two():
    M = gram(HARD2)
    np.testing.assert_allclose(M.toarray(), [[2.0, -10.0], [-10.0, 200.0]])
    assert not is_dd(M)
    res = find_dd_scaling(HARD2, MMatrixConfig.for_factor(HARD2), np.random.default_rng(1))
    assert np.all(res.D.d > 0)
    assert is_dd(M.scaled(res.D.d))


def test_scaling_iteration_properties():
    rng = np.random.default_rng(2)
    F = random_factor(rng, 40, scale_spread=1.5)
    M = gram(F)
    cfg = MMatrixConfig.for_factor(F)
    from lossyflow.linalg import dominated_rows
    state = ScalingState(D=DiagMatrix.identity(F.n), dominated=dominated_rows(M))
    assert state.bottom.size > 0
    for _ in range(5):
        new = scaling_iteration(F, state, cfg, rng)
        assert np.all(new.D.d > 0)
        assert np.all(new.dominated[state.dominated])          # never shrinks
        np.testing.assert_array_equal(new.dominated[~state.dominated],
                                      dominated_rows(M.scaled(new.D.d))[~state.dominated])
        state = new
    done = ScalingState(D=DiagMatrix.identity(F.n), dominated=np.ones(F.n, dtype=bool))
    assert scaling_iteration(F, done, cfg, rng) is done


def test_find_dd_scaling_failure_reports_best_fraction():
    rng = np.random.default_rng(3)
    F = random_factor(rng, 30, scale_spread=2.0)
    assert not is_dd(gram(F))
    cfg = MMatrixConfig.for_factor(F, max_outer_iters=0)
    with pytest.raises(ScalingError) as info:
        find_dd_scaling(F, cfg, rng)
    assert 0 <= info.value.best_fraction < 1


def test_rejects_non_mmatrix_factor():
    F = TwoNnzFactor.from_columns(2, [[(0, 1.0), (1, 1.0)], [(0, 1.0)]])
    with pytest.raises(ValueError, match="M-matrix"):
        find_dd_scaling(F, MMatrixConfig(lambda_min=0.1, lambda_max=4.0),
                        np.random.default_rng(0))


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 48),
       spread=st.sampled_from([0.0, 1.0, 2.0]))
def test_find_dd_scaling_property(seed, n, spread):
    rng = np.random.default_rng(seed)
    F = random_factor(rng, n, scale_spread=spread)
    res = find_dd_scaling(F, MMatrixConfig.for_factor(F), rng)
    assert np.all(res.D.d > 0)
    assert is_dd(gram(F).scaled(res.D.d))


# -- mmatrix_solve -------------------------------------------------------------------

def test_mmatrix_solve_examples():
    x = mmatrix_solve(LAP2, np.array([1.0, 1.0]), 1e-8, rng=np.random.default_rng(0))
    np.testing.assert_allclose(x, [1.0, 1.0], atol=1e-7)
    np.testing.assert_array_equal(mmatrix_solve(HARD2, np.zeros(2), 1e-3), [0.0, 0.0])
    one = TwoNnzFactor.from_columns(1, [[(0, 2.0)], [(0, 1.0)]])
    np.testing.assert_allclose(mmatrix_solve(one, np.array([10.0]), 0.1), [2.0])


def test_mmatrix_solve_validation():
    with pytest.raises(ValueError):
        mmatrix_solve(LAP2, np.ones(3), 1e-3)
    with pytest.raises(ValueError):
        mmatrix_solve(LAP2, np.ones(2), 1.5)


def test_mmatrix_solver_reuses_scaling():
    rng = np.random.default_rng(6)
    F = random_factor(rng, 25, scale_spread=1.5)
    solver = MMatrixSolver(F, rng=rng)
    first = solver.scaling
    for _ in range(3):
        solver.solve(rng.standard_normal(F.n), 1e-6)
    assert solver.scaling is first


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 80),
       eps=st.sampled_from([1e-2, 1e-6]))
def test_mmatrix_solve_contract(seed, n, eps):
    rng = np.random.default_rng(seed)
    F = random_factor(rng, n, scale_spread=1.5)
    M = gram(F)
    b = rng.standard_normal(n)
    ref = solve_direct(M, b)
    x = mmatrix_solve(F, b, eps, rng=rng)
    assert m_norm(M, x - ref) <= eps * m_norm(M, ref) + 1e-10


# -- random scaling statistics --------------------------------------------------------

def test_random_scaling_trial_diagonal():
    M = SparseSym(sp.diags(np.arange(1.0, 11.0)).tocsc())
    rng = np.random.default_rng(0)
    assert random_scaling_trial(M, 0.0, 1.0, rng) == 1.0
    fr = [random_scaling_trial(M, 0.2, 1.0, rng) for _ in range(2000)]
    # each row independently has d_i >= 0.2 with probability 0.8
    assert np.mean(fr) == pytest.approx(0.8, abs=3 * math.sqrt(0.16 / 20000))


def test_random_scaling_trial_validation():
    M = SparseSym.identity(3)
    with pytest.raises(ValueError):
        random_scaling_trial(M, 0.3, 1.0, np.random.default_rng(0))
    with pytest.raises(ValueError):
        random_scaling_trial(M, 0.1, 0.0, np.random.default_rng(0))


def test_scaling_trial_bound_values():
    M = SparseSym(sp.diags([1.0, 1.0, 1.0, 5.0]).tocsc())
    assert small_diagonal_fraction(M, 1.0) == 0.75    # average is 2
    frac, prob = scaling_trial_bound(M, 0.0, 1.0)
    assert frac == pytest.approx((1 / 8) * (1 - 0.75 - 2 / 3))
    assert prob == pytest.approx(1 / 7)


# -- augmented systems --------------------------------------------------------------

def random_aug(rng, n, m, with_v=True):
    cols = []
    for _ in range(m):
        i, j = rng.choice(n, 2, replace=False)
        cols.append([(i, rng.uniform(0.2, 1.0)), (j, -rng.uniform(0.2, 1.0))])
    A = TwoNnzFactor.from_columns(n, cols).matrix
    d = lambda k: DiagMatrix(10.0 ** rng.uniform(-1.5, 1.5, k))
    v = rng.standard_normal(n + m) if with_v else np.zeros(n + m)
    return AugSystem(A, d(m), d(n), d(m), v)


def _aug_error(sys, x, b):
    M = sys.assemble()
    ref = np.linalg.solve(M, b)
    return math.sqrt((x - ref) @ M @ (x - ref)), math.sqrt(ref @ M @ ref)


def test_augmented_zero_blocks_closed_form():
    n, m = 3, 4
    sys = AugSystem(sp.csc_matrix((n, m)), np.ones(m), np.ones(n), np.ones(m), np.zeros(n + m))
    np.testing.assert_array_equal(sys.assemble(), np.diag([1.0] * n + [2.0] * m))
    b = np.arange(1.0, n + m + 1)
    for inner in ("direct", "mmatrix"):
        x = solve_augmented(sys, b, 1e-8, inner=inner, rng=np.random.default_rng(0))
        np.testing.assert_allclose(x, np.concatenate([b[:n], b[n:] / 2]), rtol=1e-7)


def test_augmented_v_zero_is_plain_block_solve():
    rng = np.random.default_rng(1)
    sys = random_aug(rng, 15, 40, with_v=False)
    b = rng.standard_normal(55)
    x = solve_augmented(sys, b, 1e-10, inner="direct")
    np.testing.assert_allclose(sys.assemble() @ x, b, atol=1e-8 * np.abs(b).max())


def test_schur_factor_reproduces_schur_complement():
    rng = np.random.default_rng(2)
    sys = random_aug(rng, 10, 30)
    M = sys.assemble(with_v=False)
    n = sys.n
    S = M[:n, :n] - M[:n, n:] @ np.linalg.solve(M[n:, n:], M[n:, :n])
    np.testing.assert_allclose(gram(sys.schur_factor()).toarray(), S, rtol=1e-10,
                               atol=1e-12 * np.abs(S).max())
    lo, hi = sys.schur_bounds()
    ev = np.linalg.eigvalsh(S)
    assert lo <= ev[0] * (1 + 1e-12) and ev[-1] <= hi * (1 + 1e-12)


def test_augmented_validation_and_dump():
    rng = np.random.default_rng(3)
    sys = random_aug(rng, 4, 6)
    with pytest.raises(ValueError):
        AugSystem(sys.A, sys.D1, sys.D1, sys.D3, sys.v)
    with pytest.raises(ValueError):
        solve_augmented(sys, np.ones(3), 1e-3)
    with pytest.raises(ValueError):
        solve_augmented(sys, np.ones(10), 1e-3, inner="cholesky")
    text = sys.dump()
    for tag in ("[A]", "[D1]", "[D2]", "[D3]", "[v]"):
        assert tag in text
    assert text.startswith("# AugSystem n=4 m=6")


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 40), with_v=st.booleans(),
       eps=st.sampled_from([1e-2, 1e-5]), inner=st.sampled_from(["mmatrix", "direct"]))
def test_augmented_contract(seed, n, with_v, eps, inner):
    rng = np.random.default_rng(seed)
    sys = random_aug(rng, n, int(rng.integers(n, 3 * n + 1)), with_v)
    b = rng.standard_normal(sys.n + sys.m)
    x = solve_augmented(sys, b, eps, inner=inner, rng=rng)
    err, size = _aug_error(sys, x, b)
    assert err <= eps * size + 1e-10
