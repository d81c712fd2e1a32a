"""Top-down construction of a branching network.

A queue of (task set, layer) entries starts with every task at layer 1. Each
entry with more than one task gets a meta-initialization, an affinity
estimate and a clustering; the resulting groups branch off below that layer.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import linearizer as lin
from .branchnet import BranchingModel, new_chain, split_node
from .clusterer import DEFAULT_LAMBDAS, select_partition
from .trainer import TrainConfig, as_cache, train, train_meta_init
from .tracegen import write_atomic


class BudgetExceeded(AssertionError):
    pass


@dataclass
class BraneConfig:
    L: int = 3
    h: int = 32
    seed: int = 0
    m: int = 40  # sampled subsets per partition step
    alpha: tuple = (2, 3)  # subset size range
    d: int = 400
    lam2: float = 1e-2  # ridge strength of the logistic surrogate
    lambdas: tuple = DEFAULT_LAMBDAS
    max_growth: float = 5.0
    train: TrainConfig = field(default_factory=TrainConfig)
    meta_epochs: int | None = None  # default: half of train.epochs
    feature_graphs: int | None = 50  # graphs per task used for gradient features

    def __post_init__(self):
        if self.L < 1 or self.h < 1 or self.d < 1 or self.m < 1:
            raise ValueError("L, h, d and m must be positive")
        if self.max_growth < 1:
            raise ValueError("max_growth must be >= 1")

    def meta_cfg(self) -> TrainConfig:
        epochs = self.meta_epochs if self.meta_epochs is not None else max(1, self.train.epochs // 2)
        return replace(self.train, epochs=epochs)


@dataclass
class SearchState:
    queue: deque = field(default_factory=deque)
    checkpoints: dict = field(default_factory=dict)  # node id -> digest of its installed meta-init
    events: list = field(default_factory=list)
    meta_calls: int = 0
    train_calls: int = 0

    def log(self, kind: str, **payload) -> None:
        self.events.append({"seq": len(self.events), "event": kind, **payload})

    def audit(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.events)


@dataclass
class PartitionResult:
    groups: list  # list of tuples of task ids
    meta: BranchingModel
    trained: bool
    affinity: lin.AffinityMatrix | None = None
    density: float | None = None
    candidates: list = field(default_factory=list)


def fast_approx_partition(S, l: int, model: BranchingModel, data, cfg: BraneConfig,
                          incoming_groups: int = 1) -> PartitionResult:
    """Partition task set ``S`` (task ids) for the layers below ``l``."""
    S = tuple(sorted(model.task_id(t) for t in S))
    if not S:
        raise ValueError("empty task set")
    if not 1 <= l < model.L:
        raise ValueError(f"layer {l} must satisfy 1 <= l < L={model.L}")
    if len(S) == 1:
        return PartitionResult([S], model, False)
    cache = as_cache(data)
    names = [model.tasks[t] for t in S]
    meta = train_meta_init(model, cache, names, l, cfg.meta_cfg()).model
    p_u = meta.coords(names, l).size
    d = min(cfg.d, p_u)
    ftr = lin.extract_features(meta, cache, names, l, d, cfg.seed, "train", cfg.feature_graphs)
    fva = lin.extract_features(meta, cache, names, l, d, cfg.seed, "val", cfg.feature_graphs)
    plan = lin.make_plan(len(S), cfg.m, cfg.alpha, cfg.seed)
    table = lin.estimate_subset_losses(ftr, fva, plan, cfg.lam2)
    aff = lin.affinity_matrix(table, names, l)
    A = lin.to_clusterer_affinity(aff.T)
    sel = select_partition(A, cfg.lambdas, model.L, l, cfg.max_growth, incoming_groups)
    groups = [tuple(S[i] for i in g) for g in sel.groups]
    return PartitionResult(groups, meta, True, aff, sel.density, sel.candidates)


def autobrane(data, tasks, cfg: BraneConfig | None = None, out_dir=None) -> tuple[BranchingModel, SearchState]:
    """Search the tree, then fine-tune every task through it jointly."""
    cfg = cfg or BraneConfig()
    cache = as_cache(data)
    model = new_chain(list(tasks), cfg.L, cfg.h, cfg.seed)
    n = model.n_tasks
    state = SearchState()
    state.queue.append((tuple(range(n)), 1))
    out = Path(out_dir) if out_dir is not None else None
    while state.queue:
        S, l = state.queue.popleft()
        node = model.node_at(S[0], l)
        state.log("dequeue", tasks=[model.tasks[t] for t in S], layer=l, node=node.id)
        if l >= model.L:
            continue
        res = fast_approx_partition(S, l, model, cache, cfg)
        if res.trained:
            state.meta_calls += 1
            state.train_calls += 1
            state.log("meta_init", layer=l, node=node.id, digest=res.meta.store.digest())
            aff_path = None
            if out is not None:
                aff_path = out / f"affinity_l{l}_n{node.id}.csv"
                write_atomic(aff_path, res.affinity.to_csv())
            state.log("affinity", layer=l, node=node.id, path=aff_path.name if aff_path else None,
                      T=res.affinity.T.tolist())
            state.log("partition", layer=l, node=node.id, density=res.density,
                      groups=[[model.tasks[t] for t in g] for g in res.groups],
                      candidates=[{"lambda": c.lam, "groups": c.groups, "density": c.density,
                                   "admissible": c.admissible} for c in res.candidates])
        if len(res.groups) > 1:
            # install the meta-initialization, then branch below this node
            model = split_node(res.meta, node.id, res.groups)
            state.checkpoints[node.id] = res.meta.store.digest()
            state.log("split", layer=l, node=node.id, groups=[[model.tasks[t] for t in g] for g in res.groups],
                      module_count=model.module_count())
        for g in sorted(res.groups, key=min):
            state.queue.append((g, l + 1))
    model.check_tree()
    if cfg.train.epochs > 0:
        model = train(model, cache, model.tasks, cfg.train).model
        state.train_calls += 1
        state.log("fine_tune", epochs=cfg.train.epochs, digest=model.store.digest())
    check_budget(model, state)
    state.log("done", module_count=model.module_count(), train_calls=state.train_calls)
    if out is not None:
        model.save(out / "model")
        write_atomic(out / "audit.jsonl", state.audit())
    return model, state


def check_budget(model: BranchingModel, state: SearchState) -> None:
    internal = sum(1 for nd in model.nodes.values() if nd.layer < model.L)
    limit = model.n_tasks * model.L
    if state.meta_calls > internal:
        raise BudgetExceeded(f"{state.meta_calls} meta-inits for {internal} internal nodes")
    if state.train_calls > limit:
        raise BudgetExceeded(f"{state.train_calls} training calls exceed n*L = {limit}")
    state.log("budget", meta_calls=state.meta_calls, internal_nodes=internal, train_calls=state.train_calls,
              limit=limit)


def shared_layers(model: BranchingModel, a, b) -> int:
    """Number of processor layers routed through the same module by tasks a and b."""
    return int(np.sum(np.array(model.route(a)) == np.array(model.route(b))))
