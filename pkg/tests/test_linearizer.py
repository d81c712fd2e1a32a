import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize

from autobrane import branchnet as bn
from autobrane import linearizer as lin
from autobrane import trainer as tr


def _fs(gt, base, task, weight, tasks=("a", "b", "c")):
    N = len(base)
    z = np.zeros(N, dtype=np.int64)
    return lin.ProjectedFeatureSet(np.asarray(task), z, z, z, np.asarray(gt, float), np.asarray(base, float),
                                   np.asarray(weight, float), np.ones(N), list(tasks), 0, gt.shape[1], 1)


def test_projection_matrix_statistics():
    P = lin.projection_matrix(2000, 50, seed=1)
    assert P.shape == (2000, 50)
    assert np.array_equal(P, lin.projection_matrix(2000, 50, seed=1))
    assert abs(P.var() * 50 - 1) < 0.05
    with pytest.raises(lin.DimensionError):
        lin.projection_matrix(10, 11, 0)


def test_jl_inner_products_within_epsilon(rng):
    N, p, d = 40, 3000, 400
    V = rng.normal(size=(N, p))
    V /= np.linalg.norm(V, axis=1, keepdims=True)
    P = lin.projection_matrix(p, d, seed=2)
    err = np.abs((V @ P) @ (V @ P).T - V @ V.T)
    assert err.max() <= lin.jl_epsilon(N, d)


@given(st.integers(0, 10**6))
@settings(max_examples=15, deadline=None)
def test_newton_matches_generic_optimizer(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(60, 5))
    b = rng.normal(size=60)
    c = rng.random(60) / 60
    lam = 1e-2
    res = lin.newton_logistic(X, b, c, lam)
    ref = minimize(lambda w: c @ np.logaddexp(0, -(X @ w + b)) + lam * w @ w, np.zeros(5), method="BFGS",
                   options={"gtol": 1e-10})
    assert res.objective <= ref.fun + 1e-9
    assert np.allclose(res.w, ref.x, atol=1e-4)


def test_newton_nonconvergence_carries_best(rng):
    X = rng.normal(size=(30, 4))
    with pytest.raises(lin.NonConvergence) as info:
        lin.newton_logistic(X, np.zeros(30), np.ones(30), 1e-3, tol=0.0, max_iter=1)
    assert info.value.best is not None


def test_surrogate_is_nested_mean_over_tasks():
    rng = np.random.default_rng(0)
    gt = rng.normal(size=(6, 2))
    base = rng.normal(size=6)
    fs = _fs(gt, base, [0, 0, 0, 1, 1, 1], [0.5, 0.25, 0.25, 1 / 3, 1 / 3, 1 / 3])
    w = np.array([0.3, -0.2])
    out = lin.surrogate_losses(fs, w)
    z = gt @ w + base
    assert np.isclose(out["a"], 0.5 * np.logaddexp(0, -z[0]) + 0.25 * np.logaddexp(0, -z[1:3]).sum())
    fit = lin.fit_surrogate(fs, lam=1e-3)
    ref = minimize(lambda v: 0.5 * sum(lin.surrogate_losses(fs, v).values()) + 1e-3 * v @ v, np.zeros(2),
                   method="BFGS", options={"gtol": 1e-12})
    assert np.allclose(fit.w, ref.x, atol=1e-5)


def test_zero_displacement_has_zero_rss(tiny_data):
    base = bn.new_chain(["bfs", "dfs"], 2, 8, seed=1)
    recs = lin.rss_records(base, [base.store.vector.copy()], tiny_data, ["bfs", "dfs"], 1, max_graphs=3)
    assert recs[0].rss == 0.0 and recs[0].rel_dist == 0.0


def test_rss_small_moves_are_second_order(tiny_data):
    base = bn.new_chain(["bfs"], 2, 8, seed=1)
    cols = base.coords(["bfs"], 1)
    d = np.random.default_rng(0).normal(size=cols.size)
    snaps = []
    for t in (1e-3, 1e-2):
        v = base.store.vector.copy()
        v[cols] += t * d
        snaps.append(v)
    r = lin.rss_records(base, snaps, tiny_data, ["bfs"], 1, max_graphs=3)
    # residual is O(t^2), so its square scales by ~t^4
    assert r[1].rss / r[0].rss > 1e3
    bad = base.store.vector.copy()
    bad[base.store.layer_mask([0])] += 1.0
    with pytest.raises(ValueError):
        lin.rss_records(base, [bad], tiny_data, ["bfs"], 1)


def test_features_match_finite_differences(tiny_data):
    model = bn.new_chain(["bfs"], 2, 6, seed=3)
    cols = model.coords(["bfs"], 1)
    fs = lin.extract_features(model, tiny_data, ["bfs"], 1, projection=np.eye(cols.size), max_graphs=1)
    batch = lin._limit_graphs(tiny_data.get("bfs", "train"), 1)
    r = 5
    inst_rows = np.flatnonzero(batch.graph == fs.sample[r])
    inst = inst_rows[fs.step[r]]
    one = batch.take([inst])

    def margin(vec):
        m = model.copy()
        m.store.vector = vec
        import autobrane.diffcore as dc
        val, _ = lin.margins(m, dc.Tape(m.store), one, "bfs")
        return val.value[0, fs.node[r]]

    v0 = model.store.vector
    assert np.isclose(margin(v0), fs.base[r])
    for j in (0, 7, cols.size - 1):
        e = np.zeros_like(v0)
        e[cols[j]] = 1e-6
        fd = (margin(v0 + e) - margin(v0 - e)) / 2e-6
        assert np.isclose(fd, fs.gt[r, j], rtol=1e-4, atol=1e-7)


def test_feature_rows_and_cache(tmp_path, tiny_data):
    model = bn.new_chain(["bfs", "dfs"], 2, 6)
    fs = lin.extract_features(model, tiny_data, ["bfs", "dfs"], 1, d=20, max_graphs=2)
    assert fs.gt.shape[1] == 20 and set(fs.task.tolist()) == {0, 1}
    # nested weights: at most one unit of mass per task (rows without competitors are dropped)
    for t in (0, 1):
        assert fs.weight[fs.task == t].sum() <= 1 + 1e-12
    fs.save(tmp_path / "f.bin")
    back = lin.ProjectedFeatureSet.load(tmp_path / "f.bin")
    assert np.array_equal(back.gt, fs.gt) and back.tasks == fs.tasks
    raw = bytearray((tmp_path / "f.bin").read_bytes())
    raw[-1] ^= 1
    with pytest.raises(ValueError):
        lin.ProjectedFeatureSet.from_bytes(bytes(raw))


@given(st.integers(2, 7), st.integers(0, 40), st.integers(0, 1000))
@settings(max_examples=40, deadline=None)
def test_plan_covers_pairs(n, extra, seed):
    m = n * (n - 1) // 2 + extra
    plan = lin.make_plan(n, m, (2, 3), seed)
    assert (plan.pair_counts() > 0).all()
    assert all(1 <= len(s) <= 3 for s in plan.subsets)


def test_plan_too_small_to_cover():
    with pytest.raises(lin.UncoveredPair):
        lin.make_plan(6, 2, (2, 2), 0, max_tries=50)


def test_plan_enumerates_when_small():
    plan = lin.make_plan(4, 40, (2, 3), 0)
    assert len(plan) == 6 + 4
    assert len(set(plan.subsets)) == len(plan)


def test_affinity_from_planted_losses():
    n = 4
    plan = lin.SubsetPlan([c for k in (2, 3) for c in itertools.combinations(range(n), k)], n, (2, 3), 0)
    group = np.array([0, 0, 1, 1])

    def loss(subset, i):
        return 1.0 + sum(0.1 if group[j] != group[i] else -0.1 for j in subset if j != i)

    table = lin.SubsetLossTable(plan, {(k, i): loss(s, i) for k, s in enumerate(plan.subsets) for i in s})
    aff = lin.affinity_matrix(table, list("abcd"))
    for i, j in itertools.product(range(n), repeat=2):
        ks = [k for k, s in enumerate(plan.subsets) if i in s and j in s]
        assert np.isclose(aff.T[i, j], np.mean([loss(plan.subsets[k], i) for k in ks]))
    A = lin.to_clusterer_affinity(aff.T)
    assert np.allclose(A, A.T) and np.isclose(A.mean(), 0) and np.isclose(A.std(), 1)
    assert A[0, 1] > A[0, 2] and A[2, 3] > A[1, 3]
    tasks, T = lin.AffinityMatrix.read_csv(aff.to_csv())
    assert tasks == list("abcd") and np.array_equal(T, aff.T)


def test_affinity_rejects_uncovered_pair():
    plan = lin.SubsetPlan([(0, 1), (1, 2)], 3, (2, 2), 0)
    table = lin.SubsetLossTable(plan, {(0, 0): 1.0, (0, 1): 1.0, (1, 1): 1.0, (1, 2): 1.0})
    with pytest.raises(lin.UncoveredPair):
        lin.affinity_matrix(table)


def test_subset_estimates_reuse_fits(tiny_data):
    model = bn.new_chain(["bfs", "dfs", "bellman_ford"], 2, 6)
    ftr = lin.extract_features(model, tiny_data, model.tasks, 1, d=16, max_graphs=3)
    fva = lin.extract_features(model, tiny_data, model.tasks, 1, d=16, split="val", max_graphs=3)
    plan = lin.SubsetPlan([(0, 1), (0, 1), (0, 1, 2)], 3, (2, 3), 0)
    table = lin.estimate_subset_losses(ftr, fva, plan, lam=1e-2)
    assert len(table.fits) == 2
    assert table.losses[(0, 0)] == table.losses[(1, 0)]
    with pytest.raises(ValueError):
        other = lin.extract_features(model, tiny_data, model.tasks, 1, d=16, seed=9, split="val", max_graphs=1)
        lin.estimate_subset_losses(ftr, other, plan)


def test_gap_check_linear_identity_projection_is_exact(rng):
    X = rng.normal(size=(300, 20))
    c0 = rng.normal(size=300)
    w = np.full(300, 1 / 300)
    rep = lin.gap_check_linear(X, c0, w, 20, projection=np.eye(20))
    assert abs(rep.gap) <= 1e-9 and rep.holds and rep.delta_hat <= 1e-12


@pytest.mark.parametrize("d", [10, 40])
def test_gap_check_linear_bound_holds(rng, d):
    X = rng.normal(size=(500, 60))
    c0 = rng.normal(size=500)
    rep = lin.gap_check_linear(X, c0, np.full(500, 1 / 500), d, seed=d)
    assert rep.holds and rep.gap >= -1e-9
    assert rep.eps == lin.jl_epsilon(501, d)
