import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from zsmg import lp as lpmod
from zsmg.bench import closed_form_2x2
from zsmg.lp import (
    CCE_TOL,
    DenseLP,
    DimensionError,
    LPError,
    Stalled,
    Status,
    cce_residuals,
    cce_solve,
    matrix_game_solve,
    matrix_game_values,
    simplex_solve,
)


def vertex_enumeration(c, G, g):
    """max c@x over {G x <= g, x >= 0} by checking every basic point."""
    n = len(c)
    rows = np.vstack([G, -np.eye(n)])
    rhs = np.concatenate([g, np.zeros(n)])
    best = -np.inf
    for idx in itertools.combinations(range(len(rhs)), n):
        M = rows[list(idx)]
        if abs(np.linalg.det(M)) < 1e-10:
            continue
        x = np.linalg.solve(M, rhs[list(idx)])
        if (rows @ x <= rhs + 1e-9).all():
            best = max(best, float(c @ x))
    return best


def test_one_dimensional():
    res = simplex_solve(DenseLP([1.0], G=[[1.0]], g=[3.0]))
    assert res.status is Status.OPTIMAL
    assert res.x[0] == pytest.approx(3.0)


def test_simplex_face():
    res = simplex_solve(DenseLP([1.0, 1.0], G=[[1.0, 1.0]], g=[1.0]))
    assert res.status is Status.OPTIMAL
    assert res.objective == pytest.approx(1.0)


def test_infeasible_and_unbounded():
    res = simplex_solve(DenseLP([1.0], G=[[1.0], [-1.0]], g=[1.0, -2.0]))
    assert res.status is Status.INFEASIBLE
    res = simplex_solve(DenseLP([1.0, 0.0], G=[[-1.0, 1.0]], g=[1.0]))
    assert res.status is Status.UNBOUNDED


def test_equalities_and_lower_bounds():
    # max x + 2y, x + y = 3, x >= 1, y >= 0.5, y <= 1.5
    res = simplex_solve(DenseLP([1.0, 2.0], G=[[0.0, 1.0]], g=[1.5], E=[[1.0, 1.0]], e=[3.0], lb=[1.0, 0.5]))
    np.testing.assert_allclose(res.x, [1.5, 1.5], atol=1e-12)


def test_redundant_equalities():
    res = simplex_solve(DenseLP([1.0, 1.0], E=[[1.0, 1.0], [2.0, 2.0]], e=[1.0, 2.0]))
    assert res.status is Status.OPTIMAL
    assert res.objective == pytest.approx(1.0)


def test_dimension_errors():
    with pytest.raises(DimensionError):
        DenseLP([1.0, 2.0], G=[[1.0]], g=[1.0])
    with pytest.raises(DimensionError):
        DenseLP([np.nan])


def test_pivot_cap(monkeypatch):
    monkeypatch.setattr(lpmod, "MAX_PIVOTS", 1)
    with pytest.raises(Stalled):
        simplex_solve(DenseLP([1.0, 1.0, 1.0], G=np.eye(3), g=[1.0, 1.0, 1.0]))


@pytest.mark.parametrize("seed", range(15))
def test_matches_vertex_enumeration(seed):
    rng = np.random.default_rng(seed)
    n, m = 5, 6
    G = rng.uniform(-0.5, 1.0, size=(m, n))
    G = np.vstack([G, np.eye(n)])  # box keeps it bounded
    g = np.concatenate([rng.uniform(0.5, 2.0, size=m), np.full(n, 3.0)])
    c = rng.normal(size=n)
    res = simplex_solve(DenseLP(c, G, g))
    assert res.status is Status.OPTIMAL
    assert res.residual <= 1e-9
    assert res.objective == pytest.approx(vertex_enumeration(c, G, g), abs=1e-8)


def test_bland_terminates_on_degenerate_cycle_example():
    # Beale's example cycles under the largest-coefficient rule
    c = np.array([0.75, -150.0, 0.02, -6.0])
    G = np.array([[0.25, -60.0, -0.04, 9.0], [0.5, -90.0, -0.02, 3.0], [0.0, 0.0, 1.0, 0.0]])
    g = np.array([0.0, 0.0, 1.0])
    res = simplex_solve(DenseLP(c, G, g))
    assert res.status is Status.OPTIMAL
    assert res.objective == pytest.approx(0.05)


def test_matching_pennies_value():
    v, mu, nu = matrix_game_solve([[1.0, 0.0], [0.0, 1.0]])
    assert v == pytest.approx(0.5, abs=1e-12)
    np.testing.assert_allclose(mu, [0.5, 0.5], atol=1e-12)
    np.testing.assert_allclose(nu, [0.5, 0.5], atol=1e-12)


def test_one_by_one():
    v, mu, nu = matrix_game_solve([[0.3]])
    assert v == 0.3 and mu.tolist() == [1.0] and nu.tolist() == [1.0]


@pytest.mark.parametrize("seed", range(25))
def test_closed_form_2x2(seed):
    Q = np.random.default_rng(seed).uniform(-2, 2, size=(2, 2))
    v, _, _ = matrix_game_solve(Q)
    assert v == pytest.approx(closed_form_2x2(Q), abs=1e-9)


def test_closed_form_formula_itself():
    # hand-checked: [[3, -1], [-2, 1]] mixes at p = 3/7, value 1/7
    assert closed_form_2x2(np.array([[3.0, -1.0], [-2.0, 1.0]])) == pytest.approx(1 / 7)
    assert closed_form_2x2(np.array([[2.0, 3.0], [0.0, 1.0]])) == 2.0


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)),
              elements=st.floats(-5, 5, allow_nan=False).map(lambda x: round(x, 3))))
def test_duality_and_strategy_guarantees(Q):
    v, mu, nu = matrix_game_solve(Q)
    lo, hi = matrix_game_values(Q)
    assert abs(lo - hi) <= 1e-8
    assert abs(v - lo) <= 1e-8
    assert mu.min() >= 0 and abs(mu.sum() - 1) <= 1e-12
    assert nu.min() >= 0 and abs(nu.sum() - 1) <= 1e-12


def test_matrix_game_rejects_bad_input():
    with pytest.raises(DimensionError):
        matrix_game_solve([[np.inf, 0.0]])


def test_cce_identity_pair():
    Q = np.eye(2)
    pi = cce_solve(Q, Q)
    assert max(cce_residuals(pi, Q, Q)) <= CCE_TOL
    # the uniform product is feasible with equality
    uniform = np.full((2, 2), 0.25)
    np.testing.assert_allclose(cce_residuals(uniform, Q, Q), [0.0, 0.0], atol=1e-15)


def test_cce_single_action():
    np.testing.assert_array_equal(cce_solve([[0.7]], [[0.2]]), [[1.0]])


def brute_force_residuals(pi, Qbar, Qlow):
    A, B = pi.shape
    worst_max = max(sum(pi[a, b] * (Qbar[astar, b] - Qbar[a, b]) for a in range(A) for b in range(B))
                    for astar in range(A))
    worst_min = max(sum(pi[a, b] * (Qlow[a, b] - Qlow[a, bstar]) for a in range(A) for b in range(B))
                    for bstar in range(B))
    return worst_max, worst_min


@pytest.mark.parametrize("seed", range(40))
def test_cce_random_pairs_against_direct_constraints(seed):
    rng = np.random.default_rng(seed)
    A, B = (2, 2) if seed < 30 else tuple(rng.integers(2, 5, size=2))
    Qbar = rng.uniform(0, 3, size=(A, B))
    Qlow = Qbar - rng.uniform(0, 1, size=(A, B))
    pi = cce_solve(Qbar, Qlow)
    assert pi.min() >= 0
    assert abs(pi.sum() - 1) <= 1e-9
    rm, rn = brute_force_residuals(pi, Qbar, Qlow)
    assert rm <= CCE_TOL and rn <= CCE_TOL
    np.testing.assert_allclose(cce_residuals(pi, Qbar, Qlow), (rm, rn), atol=1e-12)


def test_cce_objectives_order_the_gap():
    rng = np.random.default_rng(3)
    for _ in range(20):
        Qbar = rng.uniform(0, 3, size=(3, 2))
        Qlow = Qbar - rng.uniform(0, 1.5, size=(3, 2))
        hi = cce_solve(Qbar, Qlow, "max_gap")
        lo = cce_solve(Qbar, Qlow, "min_gap")
        gap = Qbar - Qlow
        assert (hi * gap).sum() >= (lo * gap).sum() - 1e-9


def test_cce_rejects_bad_objective_and_shapes():
    with pytest.raises((ValueError, LPError)):
        cce_solve(np.eye(2), np.eye(2), "nope")
    with pytest.raises(DimensionError):
        cce_solve(np.eye(2), np.eye(3))


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 4), st.integers(1, 4), st.sampled_from([0, 1, 2]))
def test_cce_always_feasible(seed, A, B, mode):
    rng = np.random.default_rng(seed)
    Qbar = rng.uniform(0, 4, size=(A, B))
    Qlow = rng.uniform(0, 4, size=(A, B))
    if mode == 1:
        Qbar, Qlow = np.round(Qbar), np.round(Qlow)
    elif mode == 2:
        Qlow = np.minimum(Qlow, Qbar)
    pi = cce_solve(Qbar, Qlow)
    assert pi.shape == (A, B)
    assert pi.min() >= -1e-12 and abs(pi.sum() - 1) <= 1e-9
    assert max(cce_residuals(pi, Qbar, Qlow)) <= CCE_TOL
