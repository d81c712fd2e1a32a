import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from autobrane import clusterer as cl
from oracles import brute_force_partition, planted_affinity


def _sym(rng, n):
    A = rng.normal(size=(n, n))
    return (A + A.T) / 2


@given(arrays(np.float64, (5, 5), elements=st.floats(-2, 2)))
@settings(max_examples=30, deadline=None)
def test_projection_is_feasible(Y):
    X = cl.project_feasible(Y, tol=1e-12, max_iter=5000)
    assert np.allclose(X.sum(axis=1), 1, atol=1e-6)
    assert X.min() >= -1e-6
    assert np.linalg.eigvalsh((X + X.T) / 2).min() >= -1e-6


def test_projection_fixes_feasible_points():
    X = np.kron(np.eye(2), np.full((2, 2), 0.5))
    assert np.allclose(cl.project_feasible(X), X)


def test_sdp_solution_is_feasible(rng):
    A = _sym(rng, 6)
    sol = cl.solve_sdp(A, 0.1, 3, 1)
    assert sol.converged and sol.feasible()


def test_single_task():
    sol = cl.solve_sdp(np.array([[0.3]]), 0.1, 3, 1)
    assert np.array_equal(sol.X, [[1.0]])
    sel = cl.select_partition(np.array([[0.3]]))
    assert sel.groups == [(0,)]


def test_large_penalty_gives_one_group(rng):
    A = _sym(rng, 5)
    sol = cl.solve_sdp(A, 100.0, 3, 1)
    assert np.allclose(sol.X, 0.2, atol=1e-3)
    assert cl.round_partition(sol.X) == [tuple(range(5))]


def test_rounding_threshold():
    X = np.array([[0.6, 0.4, 0.0], [0.4, 0.6, 0.0], [0.0, 0.0, 1.0]])
    assert cl.round_partition(X) == [(0, 1), (2,)]
    # entries just under 1/n still connect within the tolerance
    X2 = np.full((3, 3), 1 / 3 - 1e-9)
    assert cl.round_partition(X2) == [(0, 1, 2)]


def test_density():
    A = np.arange(16, dtype=float).reshape(4, 4)
    A = A + A.T
    groups = [(0, 1), (2, 3)]
    expect = (A[:2, :2].sum() / 2) + (A[2:, 2:].sum() / 2)
    assert np.isclose(cl.density(A, groups), expect)


@pytest.mark.parametrize("seed", range(12))
def test_planted_blocks_match_exhaustive_search(seed):
    rng = np.random.default_rng(seed)
    k = 2 + seed % 2
    n = int(rng.integers(2 * k, 8))
    A, planted, _ = planted_affinity(n, k, 0.5, rng)
    sel = cl.select_partition(A, L=3, l=1)
    best, groups = brute_force_partition(A)
    assert sel.groups == planted == cl.canonical(groups)
    assert np.isclose(sel.density, best)


def test_growth_cap_falls_back_to_one_group():
    A = -np.ones((4, 4)) + 5 * np.eye(4)
    A = (A - A.mean()) / A.std()
    sel = cl.select_partition(A, lambdas=[0.0], L=3, l=1, max_growth=1.0)
    assert sel.groups == [(0, 1, 2, 3)]
    assert not any(c.admissible for c in sel.candidates)
    assert '"admissible": false' in sel.audit()


def test_ties_prefer_fewer_groups():
    A = np.zeros((3, 3))
    sel = cl.select_partition(A, lambdas=[0.0, 1.0])
    assert sel.groups == [(0, 1, 2)]


def test_errors(rng):
    with pytest.raises(cl.EmptyGrid):
        cl.select_partition(np.eye(3), lambdas=[])
    with pytest.raises(ValueError):
        cl.solve_sdp(rng.normal(size=(3, 3)) + np.triu(np.ones((3, 3))), 0.1, 3, 1)
    with pytest.raises(cl.NonConvergence) as info:
        cl.solve_sdp(_sym(rng, 6), 0.0, 3, 1, max_iter=2, patience=50)
    assert info.value.best is not None
