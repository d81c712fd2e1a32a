import numpy as np
import pytest

from autobrane import branchnet as bn
from autobrane import tracegen as tg
from autobrane import trainer as tr


def _nested_ce(model, pairs, task):
    """Mean over graphs of mean over steps of mean over nodes, computed per instance."""
    per_graph = []
    for g, trace in pairs:
        steps = []
        for j in range(trace.num_steps):
            logits = bn.forward_step(model, g, task, trace.steps[j], trace.source)
            m = logits.max(axis=1, keepdims=True)
            logp = logits - (np.log(np.exp(logits - m).sum(axis=1, keepdims=True)) + m)
            steps.append(-np.mean(logp[np.arange(g.num_nodes), trace.steps[j + 1]]))
        per_graph.append(np.mean(steps))
    return float(np.mean(per_graph))


def test_loss_is_nested_mean():
    pairs = [tg.make_instance("bfs", 5, 0.5, False, s) for s in range(3)]
    pairs.append((tg.Graph(2, ((0, 1, 1.0),)), tg.execute("bfs", tg.Graph(2, ((0, 1, 1.0),)), 1)))
    data = {"bfs": tg.TaskDataset("bfs", tg.DatasetConfig(), test=pairs[:3])}
    model = bn.new_chain(["bfs"], 2, 8, seed=2)
    got = tr.evaluate(model, data, ["bfs"], "test")["bfs"]["loss"]
    assert np.isclose(got, _nested_ce(model, pairs[:3], "bfs"))
    two = {"bfs": tg.TaskDataset("bfs", tg.DatasetConfig(), test=pairs[3:])}
    assert np.isclose(tr.evaluate(model, two, ["bfs"], "test")["bfs"]["loss"], _nested_ce(model, pairs[3:], "bfs"))


def test_tape_loss_matches_numpy_loss(tiny_data):
    model = bn.new_chain(["bfs"], 2, 8)
    batch = tiny_data.get("bfs", "val")
    import autobrane.diffcore as dc
    tape = dc.Tape(model.store)
    assert np.isclose(float(tr.task_loss(model, tape, batch, "bfs").value), tr.evaluate_batch(model, batch, "bfs")[1])


def test_memorizes_small_set():
    ds = tg.make_dataset("bfs", n_train=4, n_val=4, n_test=1, nodes_train=6, seed=1)
    ds.val = ds.train
    model = bn.new_chain(["bfs"], 2, 16, seed=0)
    res = tr.train(model, {"bfs": ds}, ["bfs"], tr.TrainConfig(lr=1e-2, epochs=150, batch_size=4, patience=150))
    out = tr.evaluate(res.model, {"bfs": ds}, ["bfs"], "train")["bfs"]
    assert out["acc"] >= 0.98
    assert res.curve[-1]["train_loss"] < res.curve[0]["train_loss"]


def test_frozen_layers_do_not_move(tiny_data):
    model = bn.new_chain(["bfs", "dfs"], 3, 8)
    res = tr.train(model, tiny_data, ["bfs"], tr.TrainConfig(epochs=2, frozen_layers=1))
    moved = res.model.store.vector != model.store.vector
    allowed = model.trainable_mask(["bfs"], 1)
    assert moved.any()
    assert not moved[~allowed].any()
    # the dfs decoder is never touched when training bfs alone
    dec = model.store.indices([f"dec.dfs.{b}" for b in ("q", "k", "self", "w")])
    assert not moved[dec].any()


def test_zero_epochs_is_identity(tiny_data):
    model = bn.new_chain(["bfs"], 2, 8)
    res = tr.train(model, tiny_data, ["bfs"], tr.TrainConfig(epochs=0))
    assert np.array_equal(res.model.store.vector, model.store.vector)


def test_training_is_deterministic(tiny_data):
    model = bn.new_chain(["bfs", "dfs"], 2, 8)
    cfg = tr.TrainConfig(epochs=2, seed=4)
    a = tr.train(model, tiny_data, None, cfg).model
    b = tr.train(model, tiny_data, None, cfg).model
    assert a.store.digest() == b.store.digest()


def test_best_epoch_restored(tiny_data):
    model = bn.new_chain(["bfs"], 2, 8)
    res = tr.train(model, tiny_data, ["bfs"], tr.TrainConfig(epochs=4, lr=0.05, patience=4))
    best = min(r["val_loss"] for r in res.curve)
    assert np.isclose(tr.evaluate(res.model, tiny_data, ["bfs"], "val")["bfs"]["loss"], best)


def test_meta_init_freezes_prefix(tiny_data):
    model = bn.new_chain(["bfs", "dfs"], 3, 8)
    res = tr.train_meta_init(model, tiny_data, ["bfs", "dfs"], 2, tr.TrainConfig(epochs=1))
    moved = res.model.store.vector != model.store.vector
    assert not moved[model.store.layer_mask([0, 1])].any()
    assert moved[model.store.layer_mask([2])].any()


def test_errors(tiny_data):
    model = bn.new_chain(["bfs"], 2, 8)
    with pytest.raises(tr.EmptyTaskSet):
        tr.train(model, tiny_data, [], tr.TrainConfig(epochs=1))
    with pytest.raises(ValueError):
        tr.TrainConfig(epochs=-1)


def test_curve_csv_roundtrip(tmp_path, tiny_data):
    res = tr.train(bn.new_chain(["bfs"], 2, 8), tiny_data, ["bfs"], tr.TrainConfig(epochs=2))
    tr.write_curve(res.curve, tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "epoch,task,train_loss,val_loss,val_acc" and len(lines) == 3
