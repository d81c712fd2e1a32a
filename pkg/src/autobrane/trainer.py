"""Multitask training and evaluation of branching models.

The objective nests averages the same way for every caller: per node, then
per step of a graph, then per graph, then per task.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .branchnet import BranchingModel, StepData, make_steps
from .tracegen import TaskDataset, write_atomic


class EmptyTaskSet(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 3e-3
    epochs: int = 40
    batch_size: int = 16  # graphs per task per optimizer step
    frozen_layers: int = 0  # processor layers 1..frozen_layers stay fixed
    freeze_encoder: bool | None = None  # default: frozen whenever frozen_layers > 0
    seed: int = 0
    patience: int = 10  # epochs without validation improvement before stopping
    task_weights: dict | None = None  # default uniform

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.frozen_layers < 0:
            raise ValueError("frozen_layers must be >= 0")


@dataclass
class TrainResult:
    model: BranchingModel
    curve: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    steps: int = 0


class StepCache:
    """Memoized StepData per (task, split) for a set of datasets."""

    def __init__(self, datasets: dict[str, TaskDataset]):
        self.datasets = datasets
        self._cache: dict[tuple[str, str], StepData] = {}

    def __contains__(self, task):
        return task in self.datasets

    def get(self, task: str, split: str) -> StepData:
        key = (task, split)
        if key not in self._cache:
            self._cache[key] = make_steps(self.datasets[task].split(split))
        return self._cache[key]


def as_cache(data) -> StepCache:
    return data if isinstance(data, StepCache) else StepCache(data)


def instance_weights(batch: StepData) -> np.ndarray:
    """Weight of each instance so that weighted node-mean CE is the nested mean."""
    graphs = np.unique(batch.graph).size
    return batch.step_weight / (batch.n * max(graphs, 1))


def task_loss(model: BranchingModel, tape: dc.Tape, batch: StepData, task) -> dc.Var:
    logits = model.logits(tape, batch, task)
    logp = dc.masked_log_softmax(logits, batch.candidates(), axis=-1)
    picked = dc.take_along(logp, batch.target[..., None], axis=-1)
    w = instance_weights(batch)[:, None, None]
    return dc.mul(dc.sum(dc.mul(picked, w)), -1.0)


def pointer_accuracy(logits: np.ndarray, cand: np.ndarray, target: np.ndarray) -> tuple[int, int]:
    masked = np.where(cand, logits, -np.inf)
    pred = masked.argmax(axis=-1)
    return int((pred == target).sum()), int(target.size)


def evaluate_batch(model, batch: StepData, task, chunk: int = 256) -> tuple[float, float]:
    """(pointer accuracy, nested-mean cross-entropy) on one StepData."""
    if len(batch) == 0:
        return float("nan"), float("nan")
    w_all = instance_weights(batch)
    correct = total = 0
    loss = 0.0
    for start in range(0, len(batch), chunk):
        part = batch.take(range(start, min(start + chunk, len(batch))))
        logits = model.forward_numpy(part, task)
        cand = part.candidates()
        c, t = pointer_accuracy(logits, cand, part.target)
        correct += c
        total += t
        masked = np.where(cand, logits, -np.inf)
        m = masked.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(masked - m).sum(axis=-1)) + m[..., 0]
        true = np.take_along_axis(logits, part.target[..., None], -1)[..., 0]
        loss += float(((lse - true) * w_all[start:start + len(part)][:, None]).sum())
    return correct / total, loss


def evaluate(model: BranchingModel, data, tasks=None, split: str = "test") -> dict[str, dict]:
    """Per-task pointer accuracy and mean loss on ``split``."""
    cache = as_cache(data)
    tasks = list(tasks) if tasks is not None else list(model.tasks)
    out = {}
    for task in tasks:
        name = model.tasks[model.task_id(task)]
        batch = cache.get(name, split)
        if len(batch) == 0 and batch.num_graphs == 0:
            raise ValueError(f"split {split!r} of {name} is empty")
        acc, loss = evaluate_batch(model, batch, name)
        out[name] = {"acc": acc, "loss": loss}
    return out


def objective(model: BranchingModel, data, tasks, split: str = "train") -> float:
    """Empirical nested-mean loss over ``tasks`` (uniform task weights)."""
    res = evaluate(model, data, tasks, split)
    return float(np.mean([r["loss"] for r in res.values()]))


def train(model: BranchingModel, data, tasks=None, cfg: TrainConfig | None = None, on_epoch=None) -> TrainResult:
    """Minimize the nested-mean cross-entropy over ``tasks``; returns a trained copy.

    ``on_epoch(epoch, model)`` is called after every epoch with the live model.
    """
    cfg = cfg or TrainConfig()
    cache = as_cache(data)
    tasks = list(tasks) if tasks is not None else list(model.tasks)
    if not tasks:
        raise EmptyTaskSet("no tasks to train")
    names = [model.tasks[model.task_id(t)] for t in tasks]
    for name in names:
        if name not in cache:
            raise KeyError(f"no dataset for task {name}")
    model = model.copy()
    result = TrainResult(model)
    if cfg.epochs == 0:
        return result

    weights = np.array([(cfg.task_weights or {}).get(n, 1.0) for n in names])
    weights = weights / weights.sum()
    mask = model.trainable_mask(names, cfg.frozen_layers, cfg.freeze_encoder)
    state = dc.AdamState.zeros(model.store.p)
    hyper = dc.AdamHyper(lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    train_data = {n: cache.get(n, "train") for n in names}
    graph_ids = {n: np.unique(train_data[n].graph) for n in names}
    rows_of = {n: _rows_by_graph(train_data[n]) for n in names}
    have_val = all(cache.datasets[n].val for n in names)

    best = (np.inf, model.store.vector.copy(), 0)
    stale = 0
    for epoch in range(1, cfg.epochs + 1):
        orders = {n: rng.permutation(graph_ids[n]) for n in names}
        nb = max(int(np.ceil(len(graph_ids[n]) / cfg.batch_size)) for n in names)
        train_loss = {n: 0.0 for n in names}
        for b in range(nb):
            tape = dc.Tape(model.store)
            total = None
            for wt, n in zip(weights, names):
                order = orders[n]
                if order.size == 0:
                    continue
                pick = np.take(order, np.arange(b * cfg.batch_size, (b + 1) * cfg.batch_size), mode="wrap")
                pick = np.unique(pick)
                batch = train_data[n].take(np.concatenate([rows_of[n][g] for g in pick]))
                lt = task_loss(model, tape, batch, n)
                train_loss[n] += float(lt.value) / nb
                term = dc.mul(lt, wt)
                total = term if total is None else dc.add(total, term)
            if total is None:
                break
            grad = tape.backward(total)
            model.store.vector, state = dc.adam_step(model.store.vector, np.where(mask, grad, 0.0), state,
                                                     hyper, mask)
            result.steps += 1
        if have_val:
            val = evaluate(model, cache, names, "val")
            val_loss = float(np.sum([wt * val[n]["loss"] for wt, n in zip(weights, names)]))
        else:
            val = {n: {"loss": float("nan"), "acc": float("nan")} for n in names}
            val_loss = float(np.sum([wt * train_loss[n] for wt, n in zip(weights, names)]))
        if on_epoch is not None:
            on_epoch(epoch, model)
        for n in names:
            result.curve.append({"epoch": epoch, "task": n, "train_loss": train_loss[n],
                                 "val_loss": val[n]["loss"], "val_acc": val[n]["acc"]})
        if val_loss < best[0]:
            best = (val_loss, model.store.vector.copy(), epoch)
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    model.store.vector = best[1]
    result.best_epoch = best[2]
    return result


def _rows_by_graph(batch: StepData) -> dict[int, np.ndarray]:
    out: dict[int, list] = {}
    for row, g in enumerate(batch.graph):
        out.setdefault(int(g), []).append(row)
    return {g: np.array(r, dtype=np.int64) for g, r in out.items()}


def train_meta_init(model: BranchingModel, data, tasks, l: int, cfg: TrainConfig | None = None) -> TrainResult:
    """Joint training on ``tasks`` with processor layers 1..l-1 frozen."""
    if not 1 <= l <= model.L:
        raise dc.BadLayerIndex(f"layer {l} outside 1..{model.L}")
    cfg = cfg or TrainConfig()
    cfg = TrainConfig(**{**cfg.__dict__, "frozen_layers": l - 1, "freeze_encoder": None})
    return train(model, data, tasks, cfg)


def curve_csv(curve: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=["epoch", "task", "train_loss", "val_loss", "val_acc"],
                            lineterminator="\n")
    writer.writeheader()
    for row in curve:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def write_curve(curve: list[dict], path) -> None:
    write_atomic(path, curve_csv(curve))
