import json

import numpy as np
import pytest

from autobrane import brane as br
from autobrane import branchnet as bn
from autobrane import trainer as tr


def _cfg(**kw):
    base = dict(L=3, h=8, m=6, d=16, feature_graphs=3, meta_epochs=1, train=tr.TrainConfig(epochs=1))
    base.update(kw)
    return br.BraneConfig(**base)


def test_single_task_is_a_chain(tiny_data):
    model, state = br.autobrane(tiny_data, ["bfs"], _cfg())
    assert model.module_count() == 3
    assert state.meta_calls == 0 and state.train_calls == 1


def test_one_layer_never_partitions(tiny_data):
    model, state = br.autobrane(tiny_data, ["bfs", "dfs"], _cfg(L=1))
    assert model.module_count() == 1 and state.meta_calls == 0


def test_forced_single_group_equals_mtn(tiny_data):
    cfg = _cfg(lambdas=(50.0,))
    model, state = br.autobrane(tiny_data, ["bfs", "dfs", "bellman_ford"], cfg)
    mtn = tr.train(bn.new_chain(["bfs", "dfs", "bellman_ford"], 3, 8, 0), tiny_data, None, cfg.train).model
    assert model.module_count() == 3
    assert model.store.digest() == mtn.store.digest()
    assert state.meta_calls == 2  # one per internal layer of the chain


def test_budget_and_audit(tmp_path, tiny_data):
    tasks = ["bfs", "dfs", "bellman_ford"]
    model, state = br.autobrane(tiny_data, tasks, _cfg(lambdas=(0.0,)), out_dir=tmp_path)
    n, L = 3, 3
    assert state.train_calls <= n * L
    assert state.train_calls == state.meta_calls + 1
    events = [json.loads(x) for x in (tmp_path / "audit.jsonl").read_text().splitlines()]
    kinds = [e["event"] for e in events]
    assert kinds[0] == "dequeue" and kinds[-1] == "done" and "budget" in kinds
    assert [e["seq"] for e in events] == list(range(len(events)))
    for e in events:
        if e["event"] == "affinity":
            assert (tmp_path / e["path"]).exists()
    back = bn.BranchingModel.load(tmp_path / "model")
    assert back.tree_dict() == model.tree_dict()
    model.check_tree()


def test_budget_violation_detected():
    model = bn.new_chain(["bfs", "dfs"], 2, 4)
    state = br.SearchState(meta_calls=5, train_calls=1)
    with pytest.raises(br.BudgetExceeded):
        br.check_budget(model, state)
    with pytest.raises(br.BudgetExceeded):
        br.check_budget(model, br.SearchState(meta_calls=0, train_calls=5))


def test_partition_step_outputs(tiny_data):
    model = bn.new_chain(["bfs", "dfs", "bellman_ford"], 3, 8)
    res = br.fast_approx_partition(["bfs", "dfs", "bellman_ford"], 1, model, tiny_data, _cfg())
    assert res.trained and res.affinity.T.shape == (3, 3)
    assert sorted(i for g in res.groups for i in g) == [0, 1, 2]
    with pytest.raises(ValueError):
        br.fast_approx_partition(["bfs", "dfs"], 3, model, tiny_data, _cfg())
    single = br.fast_approx_partition(["dfs"], 1, model, tiny_data, _cfg())
    assert not single.trained and single.groups == [(1,)]


def test_split_installs_meta_init(tiny_data):
    model, state = br.autobrane(tiny_data, ["bfs", "dfs", "bellman_ford"], _cfg(lambdas=(0.0,), train=tr.TrainConfig(epochs=0)))
    splits = [e for e in state.events if e["event"] == "split"]
    if splits:
        assert splits[0]["node"] in state.checkpoints
    assert br.shared_layers(model, "bfs", "bfs") == 3
    assert 1 <= br.shared_layers(model, "bfs", "dfs") <= 3


def test_config_validation():
    with pytest.raises(ValueError):
        br.BraneConfig(L=0)
    with pytest.raises(ValueError):
        br.BraneConfig(max_growth=0.5)
    assert br.BraneConfig(train=tr.TrainConfig(epochs=10)).meta_cfg().epochs == 5
