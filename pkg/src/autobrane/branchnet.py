"""Encode-process-decode network whose processor layers form a tree.

Layer 0 holds the shared encoder, layers 1..L hold processor modules (tree
nodes) and layer L+1 holds the per-task pointer decoders. Each task is routed
through exactly one module per processor layer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .tracegen import Graph, Trace, canonical_task, write_atomic

NUM_NODE_FEATURES = 4  # is-source, is-self-pointer, normalized degree, position
NUM_EDGE_FEATURES = 3  # weight, edge is receiver's pointer, edge is sender's pointer

MODULE_BLOCKS = ("src", "dst", "edge", "bm", "upd_h", "upd_a", "bu")

# tasks whose pointer may target any node, not only self or an in-neighbor
DENSE_POINTER_TASKS = frozenset({"topo_sort"})


class BadPartition(ValueError):
    pass


class LeafSplit(ValueError):
    pass


class UnknownTask(KeyError):
    pass


# --------------------------------------------------------------------------
# input encoding


@dataclass
class StepData:
    """Teacher-forced (graph, step) instances, all on graphs of one size."""

    weights: np.ndarray  # (N, n, n) w[u, v] for edge u -> v
    adj: np.ndarray  # (N, n, n) bool
    source: np.ndarray  # (N, n) one-hot, zeros when the task has no source
    ptr: np.ndarray  # (N, n) current labels
    target: np.ndarray  # (N, n) labels after the step
    graph: np.ndarray  # (N,) index of the owning graph
    step_weight: np.ndarray  # (N,) 1 / number of steps of the owning graph
    num_graphs: int
    dense: bool = False  # every node is a candidate predecessor

    @property
    def n(self) -> int:
        return self.ptr.shape[1]

    def __len__(self):
        return self.ptr.shape[0]

    def take(self, rows) -> "StepData":
        rows = np.asarray(rows, dtype=np.int64)
        return StepData(self.weights[rows], self.adj[rows], self.source[rows], self.ptr[rows],
                        self.target[rows], self.graph[rows], self.step_weight[rows], self.num_graphs, self.dense)

    def graphs(self, graph_ids) -> "StepData":
        graph_ids = np.asarray(graph_ids)
        rows = np.flatnonzero(np.isin(self.graph, graph_ids))
        sub = self.take(rows)
        sub.num_graphs = len(graph_ids)
        return sub

    def candidates(self) -> np.ndarray:
        """(N, n, n) bool: v is a possible predecessor of u (self or in-neighbor)."""
        if self.dense:
            return np.ones((len(self), self.n, self.n), dtype=bool)
        eye = np.eye(self.n, dtype=bool)
        return eye[None] | np.swapaxes(self.adj, 1, 2)

    def node_features(self) -> np.ndarray:
        n = self.n
        deg = self.adj.sum(axis=2) + self.adj.sum(axis=1)
        deg = deg / max(2 * (n - 1), 1)
        is_self = (self.ptr == np.arange(n)[None]).astype(float)
        pos = np.broadcast_to(np.arange(n) / n, self.ptr.shape)
        return np.stack([self.source, is_self, deg, pos], axis=-1)

    def edge_features(self) -> np.ndarray:
        n = self.n
        ar = np.arange(n)
        recv_ptr = self.ptr[:, None, :] == ar[None, :, None]  # ptr[v] == u at [u, v]
        send_ptr = self.ptr[:, :, None] == ar[None, None, :]  # ptr[u] == v at [u, v]
        return np.stack([self.weights, recv_ptr & self.adj, send_ptr & self.adj], axis=-1).astype(float)


def make_steps(pairs: list[tuple[Graph, Trace]]) -> StepData:
    """Turn (graph, trace) pairs into one instance per step j -> j+1."""
    if not pairs:
        raise ValueError("no graphs given")
    n = pairs[0][0].num_nodes
    dense = pairs[0][1].task in DENSE_POINTER_TASKS
    ws, adjs, srcs, ptrs, tgts, gids, sws = [], [], [], [], [], [], []
    for gi, (g, t) in enumerate(pairs):
        if g.num_nodes != n:
            raise ValueError("all graphs in one StepData must share a size")
        S = t.num_steps
        if S == 0:
            continue
        w = g.weight_matrix()
        a = g.adjacency()
        src = np.zeros(n)
        if t.source is not None:
            src[t.source] = 1.0
        for j in range(S):
            ws.append(w)
            adjs.append(a)
            srcs.append(src)
            ptrs.append(t.steps[j])
            tgts.append(t.steps[j + 1])
            gids.append(gi)
            sws.append(1.0 / S)
    if not ws:
        empty = np.zeros((0, n, n))
        return StepData(empty, empty.astype(bool), np.zeros((0, n)), np.zeros((0, n), int),
                        np.zeros((0, n), int), np.zeros(0, int), np.zeros(0), len(pairs), dense)
    return StepData(np.array(ws), np.array(adjs), np.array(srcs), np.array(ptrs, dtype=np.int64),
                    np.array(tgts, dtype=np.int64), np.array(gids, dtype=np.int64), np.array(sws),
                    len(pairs), dense)


# --------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class TreeNode:
    id: int
    layer: int
    parent: int | None
    tasks: frozenset


def _is_module_block(name: str) -> bool:
    head = name.split(".", 1)[0]
    return head[0] == "n" and head[1:].isdigit()


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _module_blocks(rng, h):
    return {
        "src": _uniform(rng, (h, h), h),
        "dst": _uniform(rng, (h, h), h),
        "edge": _uniform(rng, (NUM_EDGE_FEATURES, h), NUM_EDGE_FEATURES),
        "bm": np.zeros(h),
        "upd_h": _uniform(rng, (h, h), 2 * h),
        "upd_a": _uniform(rng, (h, h), 2 * h),
        "bu": np.zeros(h),
    }


class BranchingModel:
    def __init__(self, tasks, L: int, h: int, seed: int = 0):
        if L < 1 or h < 1:
            raise ValueError("need L >= 1 and h >= 1")
        self.tasks = [canonical_task(t) for t in tasks]
        if len(set(self.tasks)) != len(self.tasks):
            raise ValueError("duplicate task")
        self.L = int(L)
        self.h = int(h)
        self.seed = int(seed)
        self.nodes: dict[int, TreeNode] = {}
        self.store: dc.ParamStore | None = None
        self._next_id = 0

    # ---- structure -------------------------------------------------------
    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    def task_id(self, task) -> int:
        if isinstance(task, (int, np.integer)):
            if not 0 <= task < self.n_tasks:
                raise UnknownTask(task)
            return int(task)
        try:
            return self.tasks.index(canonical_task(task))
        except (ValueError, KeyError) as exc:
            raise UnknownTask(task) from exc

    def route(self, task) -> list[int]:
        """Node ids visited by ``task`` at layers 1..L."""
        t = self.task_id(task)
        path = [nid for nid, node in sorted(self.nodes.items(), key=lambda kv: kv[1].layer) if t in node.tasks]
        return path

    def node_at(self, task, layer: int) -> TreeNode:
        return self.nodes[self.route(task)[layer - 1]]

    def children(self, node_id: int) -> list[int]:
        return sorted(nid for nid, nd in self.nodes.items() if nd.parent == node_id)

    def layer_nodes(self, layer: int) -> list[TreeNode]:
        return [nd for nid, nd in sorted(self.nodes.items()) if nd.layer == layer]

    def module_count(self) -> int:
        return len(self.nodes)

    def memory_ratio(self) -> float:
        return self.module_count() / self.L

    def check_tree(self) -> None:
        every = frozenset(range(self.n_tasks))
        for layer in range(1, self.L + 1):
            sets = [nd.tasks for nd in self.layer_nodes(layer)]
            union = frozenset().union(*sets) if sets else frozenset()
            if union != every or sum(len(s) for s in sets) != self.n_tasks:
                raise AssertionError(f"layer {layer} task sets do not partition the tasks")
        for t in range(self.n_tasks):
            path = self.route(t)
            if [self.nodes[i].layer for i in path] != list(range(1, self.L + 1)):
                raise AssertionError(f"task {t} route is not a root-to-leaf path")
            for a, b in zip(path[:-1], path[1:]):
                if self.nodes[b].parent != a:
                    raise AssertionError("route does not follow parent links")

    # ---- parameters ------------------------------------------------------
    def param_name(self, node_id: int, block: str) -> str:
        return f"n{node_id}.{block}"

    def module_params(self, node_id: int) -> dict[str, np.ndarray]:
        return {b: self.store.view(self.param_name(node_id, b)).copy() for b in MODULE_BLOCKS}

    def _rebuild(self, modules: dict[int, dict[str, np.ndarray]], others: list) -> None:
        blocks = list(others)
        for nid in sorted(modules):
            layer = self.nodes[nid].layer
            for b in MODULE_BLOCKS:
                blocks.append((layer, self.param_name(nid, b), modules[nid][b]))
        self.store = dc.ParamStore(blocks, self.L, seeds={"model": self.seed})

    def _non_module_blocks(self) -> list:
        return [(layer, name, arr) for layer, name, arr in self.store.items() if not _is_module_block(name)]

    def copy(self) -> "BranchingModel":
        new = BranchingModel(self.tasks, self.L, self.h, self.seed)
        new.nodes = dict(self.nodes)
        new.store = self.store.copy()
        new._next_id = self._next_id
        return new

    # ---- forward ---------------------------------------------------------
    def logits(self, tape: dc.Tape, batch: StepData, task) -> dc.Var:
        """Pair scores (N, n, n): entry [u, v] scores v as u's predecessor.
        Non-candidate entries are fixed at 0."""
        t = self.task_id(task)
        name = self.tasks[t]
        x = batch.node_features()
        z = dc.matmul(x, tape.param("enc.x")) + tape.param("enc.b")
        h = dc.relu(z + dc.matmul(dc.gather_rows(z, batch.ptr), tape.param("enc.ptr")))
        efeat = batch.edge_features()
        for nid in self.route(t):
            p = lambda b, nid=nid: tape.param(self.param_name(nid, b))  # noqa: E731
            agg = dc.edge_max_message(dc.matmul(h, p("src")), dc.matmul(h, p("dst")), efeat, p("edge"), p("bm"),
                                      batch.adj)
            h = h + dc.relu(dc.matmul(h, p("upd_h")) + dc.matmul(agg, p("upd_a")) + p("bu"))
        q = dc.matmul(h, tape.param(f"dec.{name}.q"))
        k = dc.matmul(h, tape.param(f"dec.{name}.k"))
        scores = dc.matmul(q, dc.transpose(k))
        eye = np.eye(batch.n)
        scores = scores + eye * tape.param(f"dec.{name}.self") + np.swapaxes(batch.weights, 1, 2) * tape.param(
            f"dec.{name}.w")
        return dc.mul(scores, batch.candidates().astype(float))

    def forward_numpy(self, batch: StepData, task) -> np.ndarray:
        tape = dc.Tape(self.store)
        return self.logits(tape, batch, task).value

    # ---- linearization support -------------------------------------------
    def coords(self, tasks, l: int) -> np.ndarray:
        """Flat indices of the parameters a task set trains from layer ``l`` on:
        its routed modules at layers >= l and its decoders."""
        if not 1 <= l <= self.L:
            raise dc.BadLayerIndex(l)
        names = []
        seen = set()
        for t in sorted(self.task_id(x) for x in tasks):
            for nid in self.route(t)[l - 1:]:
                if nid not in seen:
                    seen.add(nid)
                    names.extend(self.param_name(nid, b) for b in MODULE_BLOCKS)
            names.extend(f"dec.{self.tasks[t]}.{b}" for b in ("q", "k", "self", "w"))
        idx = self.store.indices(names)
        return np.sort(idx)

    def trainable_mask(self, tasks, frozen_layers: int = 0, freeze_encoder: bool | None = None) -> np.ndarray:
        if not 0 <= frozen_layers < self.L:
            raise ValueError(f"frozen prefix {frozen_layers} must lie in [0, L)")
        if freeze_encoder is None:
            freeze_encoder = frozen_layers > 0
        mask = np.zeros(self.store.p, dtype=bool)
        mask[self.coords(tasks, frozen_layers + 1)] = True
        if not freeze_encoder:
            mask |= self.store.layer_mask([0])
        return mask

    # ---- serialization ---------------------------------------------------
    def tree_dict(self) -> dict:
        return {
            "tasks": self.tasks,
            "L": self.L,
            "h": self.h,
            "seed": self.seed,
            "next_id": self._next_id,
            "nodes": [[nd.id, nd.layer, nd.parent, sorted(nd.tasks)] for _, nd in sorted(self.nodes.items())],
        }

    def save(self, directory) -> None:
        directory = Path(directory)
        write_atomic(directory / "tree.json", json.dumps(self.tree_dict(), indent=1) + "\n")
        write_atomic(directory / "params.ckpt", self.store.to_bytes())
        write_atomic(directory / "tree.dot", to_dot(self))

    @classmethod
    def load(cls, directory) -> "BranchingModel":
        directory = Path(directory)
        meta = json.loads((directory / "tree.json").read_text())
        model = cls(meta["tasks"], meta["L"], meta["h"], meta["seed"])
        model._next_id = meta["next_id"]
        for nid, layer, parent, tasks in meta["nodes"]:
            model.nodes[nid] = TreeNode(nid, layer, parent, frozenset(tasks))
        model.store = dc.ParamStore.load(directory / "params.ckpt")
        return model


def new_chain(tasks, L: int, h: int = 32, seed: int = 0) -> BranchingModel:
    """Single path of L modules shared by every task."""
    if isinstance(tasks, int):
        from .tracegen import ALGORITHMS

        tasks = ALGORITHMS[:tasks]
    model = BranchingModel(tasks, L, h, seed)
    rng = np.random.default_rng(seed)
    every = frozenset(range(model.n_tasks))
    others = [
        (0, "enc.x", _uniform(rng, (NUM_NODE_FEATURES, h), NUM_NODE_FEATURES)),
        (0, "enc.b", np.zeros(h)),
        (0, "enc.ptr", _uniform(rng, (h, h), h)),
    ]
    modules = {}
    parent = None
    for layer in range(1, L + 1):
        nid = model._next_id
        model._next_id += 1
        model.nodes[nid] = TreeNode(nid, layer, parent, every)
        modules[nid] = _module_blocks(rng, h)
        parent = nid
    for name in model.tasks:
        others += [
            (L + 1, f"dec.{name}.q", _uniform(rng, (h, h), h)),
            (L + 1, f"dec.{name}.k", _uniform(rng, (h, h), h)),
            (L + 1, f"dec.{name}.self", np.zeros(1)),
            (L + 1, f"dec.{name}.w", np.zeros(1)),
        ]
    model._rebuild(modules, others)
    return model


def _subtree(model: BranchingModel, node_id: int) -> list[int]:
    out = []
    frontier = model.children(node_id)
    while frontier:
        nid = frontier.pop()
        out.append(nid)
        frontier.extend(model.children(nid))
    return sorted(out)


def split_node(model: BranchingModel, node_id: int, partition) -> BranchingModel:
    """Replace the subtree below ``node_id`` with one copied chain per group.

    Each group's new modules copy the weights its first task currently routes
    through, so outputs are unchanged right after the split.
    """
    node = model.nodes[node_id]
    if node.layer >= model.L:
        raise LeafSplit(f"node {node_id} is at the last layer")
    groups = [frozenset(model.task_id(t) for t in g) for g in partition]
    if any(not g for g in groups):
        raise BadPartition("empty group")
    if sum(len(g) for g in groups) != len(node.tasks) or frozenset().union(*groups) != node.tasks:
        raise BadPartition("groups must partition the node's task set")

    new = model.copy()
    modules = {nid: model.module_params(nid) for nid in model.nodes}
    for nid in _subtree(model, node_id):
        del new.nodes[nid]
        del modules[nid]
    for g in sorted(groups, key=min):
        old_path = model.route(min(g))[node.layer:]
        parent = node_id
        for old in old_path:
            nid = new._next_id
            new._next_id += 1
            new.nodes[nid] = TreeNode(nid, model.nodes[old].layer, parent, g)
            modules[nid] = {b: arr.copy() for b, arr in model.module_params(old).items()}
            parent = nid
    new._rebuild(modules, model._non_module_blocks())
    return new


def forward_step(model: BranchingModel, graph: Graph, task, current_labels, source: int | None = None) -> np.ndarray:
    """Logits (n, n) for one step; row u scores candidates v, non-candidates -inf."""
    labels = np.asarray(current_labels, dtype=np.int64)
    n = graph.num_nodes
    if labels.shape != (n,) or labels.min() < 0 or labels.max() >= n:
        raise ValueError("current_labels must be a valid label row")
    src = np.zeros((1, n))
    if source is not None:
        src[0, source] = 1.0
    batch = StepData(graph.weight_matrix()[None], graph.adjacency()[None], src, labels[None], labels[None],
                     np.zeros(1, dtype=np.int64), np.ones(1), 1, canonical_task(task) in DENSE_POINTER_TASKS)
    logits = model.forward_numpy(batch, task)[0]
    return np.where(batch.candidates()[0], logits, -np.inf)


def to_dot(model: BranchingModel) -> str:
    lines = ["digraph branching {", "  rankdir=TB;"]
    for nid, nd in sorted(model.nodes.items()):
        names = ",".join(model.tasks[t] for t in sorted(nd.tasks))
        lines.append(f'  n{nid} [label="L{nd.layer}: {names}"];')
        if nd.parent is not None:
            lines.append(f"  n{nd.parent} -> n{nid};")
    lines.append("}")
    return "\n".join(lines) + "\n"
