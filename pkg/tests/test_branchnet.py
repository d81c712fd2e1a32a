import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from autobrane import branchnet as bn
from autobrane import tracegen as tg

TASKS = ["bfs", "dfs", "bellman_ford", "dijkstra"]


def _batch(task="bfs", n=6, graphs=3, seed=0):
    pairs = [tg.make_instance(task, n, 0.4, task in ("bellman_ford", "dijkstra"), seed + i) for i in range(graphs)]
    return bn.make_steps(pairs)


def test_chain_counts():
    m = bn.new_chain(TASKS, 3, 8)
    assert m.module_count() == 3
    assert m.memory_ratio() == 1.0
    assert all(m.route(t) == m.route("bfs") for t in TASKS)


def test_split_keeps_outputs():
    m = bn.new_chain(TASKS, 3, 8, seed=1)
    batch = _batch()
    before = {t: m.forward_numpy(batch, t) for t in TASKS}
    root = m.node_at("bfs", 1)
    s = bn.split_node(m, root.id, [["bfs", "bellman_ford"], ["dfs"], ["dijkstra"]])
    s.check_tree()
    assert s.module_count() == 1 + 3 * 2
    for t in TASKS:
        assert np.array_equal(s.forward_numpy(batch, t), before[t])
    assert s.route("bfs") == s.route("bellman_ford") != s.route("dfs")


@given(st.lists(st.integers(0, 3), min_size=4, max_size=4), st.integers(1, 2))
@settings(max_examples=30, deadline=None)
def test_split_module_count(labels, layer):
    m = bn.new_chain(TASKS, 3, 4)
    groups = [[TASKS[i] for i in range(4) if labels[i] == c] for c in sorted(set(labels))]
    s = bn.split_node(m, m.node_at("bfs", layer).id, groups)
    assert s.module_count() == layer + len(groups) * (3 - layer)
    assert 1 <= s.memory_ratio() <= len(TASKS)


def test_split_errors():
    m = bn.new_chain(TASKS, 2, 4)
    with pytest.raises(bn.BadPartition):
        bn.split_node(m, m.node_at("bfs", 1).id, [["bfs"], ["dfs"]])
    with pytest.raises(bn.BadPartition):
        bn.split_node(m, m.node_at("bfs", 1).id, [["bfs", "dfs"], ["dfs", "bellman_ford", "dijkstra"]])
    with pytest.raises(bn.LeafSplit):
        bn.split_node(m, m.node_at("bfs", 2).id, [TASKS])
    with pytest.raises(bn.UnknownTask):
        m.task_id("prim")


def test_candidates_are_self_or_in_neighbors():
    b = _batch()
    cand = b.candidates()
    assert cand[:, np.arange(b.n), np.arange(b.n)].all()
    assert np.array_equal(cand & ~np.eye(b.n, dtype=bool), np.swapaxes(b.adj, 1, 2))
    # every target is a candidate
    assert np.take_along_axis(cand, b.target[..., None], axis=2).all()


def test_topo_sort_uses_dense_candidates():
    b = _batch("topo_sort", graphs=4)
    assert b.dense and b.candidates().all()
    m = bn.new_chain(["topo_sort"], 2, 4)
    g, tr = tg.make_instance("topo_sort", 6, 0.4, False, 0)
    out = bn.forward_step(m, g, "topo_sort", tr.steps[0])
    assert np.isfinite(out).all()


def test_forward_step_masks_non_candidates():
    m = bn.new_chain(["bfs"], 2, 4)
    g = tg.toy_graph()
    out = bn.forward_step(m, g, "bfs", np.arange(5), source=0)
    adj = g.adjacency()
    assert np.array_equal(np.isfinite(out), adj.T | np.eye(5, dtype=bool))
    with pytest.raises(ValueError):
        bn.forward_step(m, g, "bfs", np.arange(4))


def test_make_steps_weights():
    g, tr = tg.make_instance("bfs", 6, 0.4, False, 3)
    b = bn.make_steps([(g, tr)])
    assert len(b) == tr.num_steps
    assert np.isclose(b.step_weight.sum(), 1.0)


def test_coords_and_mask():
    m = bn.new_chain(TASKS, 3, 4)
    m = bn.split_node(m, m.node_at("bfs", 1).id, [["bfs", "bellman_ford"], ["dfs", "dijkstra"]])
    c1 = set(m.coords(["bfs"], 1).tolist())
    c2 = set(m.coords(["bfs"], 2).tolist())
    assert c2 < c1
    assert set(m.coords(["bfs"], 2).tolist()).isdisjoint(m.coords(["dfs"], 2).tolist())
    enc = m.store.layer_mask([0])
    assert not enc[list(c1)].any()
    mask = m.trainable_mask(["bfs"], frozen_layers=1)
    assert set(np.flatnonzero(mask).tolist()) == c2
    assert m.trainable_mask(["bfs"], 0)[enc].all()


def test_save_load_roundtrip(tmp_path):
    m = bn.new_chain(TASKS, 3, 4, seed=5)
    m = bn.split_node(m, m.node_at("bfs", 2).id, [["bfs"], ["dfs", "bellman_ford", "dijkstra"]])
    m.save(tmp_path / "m")
    back = bn.BranchingModel.load(tmp_path / "m")
    assert back.tree_dict() == m.tree_dict()
    b = _batch()
    assert np.array_equal(back.forward_numpy(b, "dfs"), m.forward_numpy(b, "dfs"))
    assert "digraph" in bn.to_dot(back)
