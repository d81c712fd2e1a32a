"""Random graphs and step-by-step execution traces of classical graph algorithms.

Every trace stores one row of predecessor labels per algorithm step. Row 0 is
the identity labeling; a node that has not been reached keeps its own id.
Neighbors are scanned in ascending id order and priority-queue ties go to the
smaller id, so traces are a pure function of (algorithm, graph, source).
"""

from __future__ import annotations

import hashlib
import heapq
import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1

ALGORITHMS = ("bfs", "dfs", "bellman_ford", "dijkstra", "prim", "topo_sort", "dag_shortest_paths")
NEEDS_SOURCE = {"bfs", "dfs", "bellman_ford", "dijkstra", "prim", "dag_shortest_paths"}
NEEDS_DAG = {"topo_sort", "dag_shortest_paths"}

# default edge-weight regime per task when a dataset config does not say
DEFAULT_WEIGHTED = {
    "bfs": False,
    "dfs": False,
    "bellman_ford": True,
    "dijkstra": True,
    "prim": True,
    "topo_sort": False,
    "dag_shortest_paths": True,
}

_ALIASES = {a.replace("_", ""): a for a in ALGORITHMS}
_ALIASES.update(bf="bellman_ford", topo="topo_sort", dagsp="dag_shortest_paths")


class TraceError(ValueError):
    pass


class MissingSource(TraceError):
    pass


class NotADAG(TraceError):
    pass


class GraphMismatch(TraceError):
    pass


class UnknownAlgorithm(TraceError):
    pass


def canonical_task(name: str) -> str:
    key = name.strip().lower().replace("-", "").replace("_", "")
    if key not in _ALIASES:
        raise UnknownAlgorithm(f"unknown algorithm {name!r}")
    return _ALIASES[key]


@dataclass(frozen=True)
class Graph:
    num_nodes: int
    edges: tuple[tuple[int, int, float], ...]
    directed: bool = False
    seed: int = 0

    def __post_init__(self):
        seen = set()
        for u, v, w in self.edges:
            if not (0 <= u < self.num_nodes and 0 <= v < self.num_nodes):
                raise ValueError(f"edge ({u}, {v}) out of range")
            if u == v:
                raise ValueError("self-loops are not allowed")
            if not self.directed and u > v:
                raise ValueError("undirected edges must be stored with u < v")
            if w < 0:
                raise ValueError("negative edge weight")
            if (u, v) in seen:
                raise ValueError(f"duplicate edge ({u}, {v})")
            seen.add((u, v))

    def neighbors(self) -> list[list[tuple[int, float]]]:
        """Out-neighbor lists sorted by node id."""
        nbrs: list[list[tuple[int, float]]] = [[] for _ in range(self.num_nodes)]
        for u, v, w in self.edges:
            nbrs[u].append((v, w))
            if not self.directed:
                nbrs[v].append((u, w))
        for lst in nbrs:
            lst.sort()
        return nbrs

    def weight_matrix(self) -> np.ndarray:
        """Dense (n, n) matrix with w[u, v] for an edge u -> v, 0 elsewhere."""
        w = np.zeros((self.num_nodes, self.num_nodes))
        for u, v, wt in self.edges:
            w[u, v] = wt
            if not self.directed:
                w[v, u] = wt
        return w

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.num_nodes, self.num_nodes), dtype=bool)
        for u, v, _ in self.edges:
            a[u, v] = True
            if not self.directed:
                a[v, u] = True
        return a

    def is_dag(self) -> bool:
        if not self.directed:
            return len(self.edges) == 0
        return _kahn_order(self) is not None


@dataclass(frozen=True)
class Trace:
    task: str
    source: int | None
    steps: np.ndarray  # (S + 1, num_nodes) int

    @property
    def num_steps(self) -> int:
        return self.steps.shape[0] - 1

    @property
    def final(self) -> np.ndarray:
        return self.steps[-1]

    def __eq__(self, other):
        if not isinstance(other, Trace):
            return NotImplemented
        return (
            self.task == other.task
            and self.source == other.source
            and self.steps.shape == other.steps.shape
            and bool(np.all(self.steps == other.steps))
        )

    __hash__ = None


# --------------------------------------------------------------------------
# graph generation


def _seed_int(seed) -> int:
    return int(seed) & 0xFFFFFFFFFFFFFFFF


def gen_er_graph(n: int, p: float, weighted: bool = False, seed: int = 0, dag: bool = False) -> Graph:
    """Erdos-Renyi graph, repaired to (weakly) connected by a random chain.

    With ``dag=True`` edges are oriented along a random topological order.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    rng = np.random.default_rng(_seed_int(seed))
    order = rng.permutation(n) if dag else np.arange(n)
    rank = np.empty(n, dtype=int)
    rank[order] = np.arange(n)

    pairs = []
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < p:
                pairs.append((i, j))

    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for i, j in pairs:
        parent[find(i)] = find(j)
    chain = rng.permutation(n)
    for a, b in zip(chain[:-1], chain[1:]):
        ra, rb = find(int(a)), find(int(b))
        if ra != rb:
            parent[ra] = rb
            pairs.append((min(int(a), int(b)), max(int(a), int(b))))

    edges = []
    for i, j in sorted(set(pairs)):
        w = float(rng.uniform(0.2, 1.0)) if weighted else 1.0
        if dag:
            u, v = (i, j) if rank[i] < rank[j] else (j, i)
            edges.append((u, v, w))
        else:
            edges.append((i, j, w))
    edges.sort()
    return Graph(n, tuple(edges), directed=dag, seed=_seed_int(seed))


# --------------------------------------------------------------------------
# algorithm execution


def _kahn_order(graph: Graph) -> list[int] | None:
    n = graph.num_nodes
    indeg = [0] * n
    for _, v, _ in graph.edges:
        indeg[v] += 1
    nbrs = graph.neighbors()
    heap = [v for v in range(n) if indeg[v] == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        u = heapq.heappop(heap)
        order.append(u)
        for v, _ in nbrs[u]:
            indeg[v] -= 1
            if indeg[v] == 0:
                heapq.heappush(heap, v)
    return order if len(order) == n else None


def _bfs(graph, s):
    nbrs = graph.neighbors()
    labels = list(range(graph.num_nodes))
    rows = [labels[:]]
    seen = {s}
    queue = deque([s])
    while queue:
        u = queue.popleft()
        for v, _ in nbrs[u]:
            if v not in seen:
                seen.add(v)
                labels[v] = u
                rows.append(labels[:])
                queue.append(v)
    return rows


def _dfs(graph, s):
    nbrs = graph.neighbors()
    labels = list(range(graph.num_nodes))
    rows = [labels[:]]
    seen = {s}
    stack = [(s, iter(nbrs[s]))]
    while stack:
        u, it = stack[-1]
        for v, _ in it:
            if v not in seen:
                seen.add(v)
                labels[v] = u
                rows.append(labels[:])
                stack.append((v, iter(nbrs[v])))
                break
        else:
            stack.pop()
    return rows


def _directed_edges(graph):
    out = []
    for u, v, w in graph.edges:
        out.append((u, v, w))
        if not graph.directed:
            out.append((v, u, w))
    out.sort()
    return out


def _bellman_ford(graph, s):
    n = graph.num_nodes
    edges = _directed_edges(graph)
    dist = [math.inf] * n
    dist[s] = 0.0
    labels = list(range(n))
    rows = [labels[:]]
    for _ in range(max(n - 1, 0)):
        new_dist = dist[:]
        new_labels = labels[:]
        for u, v, w in edges:
            if dist[u] + w < new_dist[v]:
                new_dist[v] = dist[u] + w
                new_labels[v] = u
        if new_labels == labels and new_dist == dist:
            break
        dist, labels = new_dist, new_labels
        rows.append(labels[:])
    return rows


def _greedy_tree(graph, s, prim):
    n = graph.num_nodes
    nbrs = graph.neighbors()
    key = [math.inf] * n
    key[s] = 0.0
    done = [False] * n
    labels = list(range(n))
    rows = [labels[:]]
    heap = [(0.0, s)]
    while heap:
        k, u = heapq.heappop(heap)
        if done[u] or k > key[u]:
            continue
        done[u] = True
        for v, w in nbrs[u]:
            if done[v]:
                continue
            cand = w if prim else key[u] + w
            if cand < key[v]:
                key[v] = cand
                labels[v] = u
                heapq.heappush(heap, (cand, v))
        rows.append(labels[:])
    return rows


def _topo_sort(graph):
    order = _kahn_order(graph)
    labels = list(range(graph.num_nodes))
    rows = [labels[:]]
    prev = None
    for u in order:
        labels[u] = u if prev is None else prev
        prev = u
        rows.append(labels[:])
    return rows


def _dag_shortest_paths(graph, s):
    order = _kahn_order(graph)
    nbrs = graph.neighbors()
    n = graph.num_nodes
    dist = [math.inf] * n
    dist[s] = 0.0
    labels = list(range(n))
    rows = [labels[:]]
    for u in order:
        if dist[u] < math.inf:
            for v, w in nbrs[u]:
                if dist[u] + w < dist[v]:
                    dist[v] = dist[u] + w
                    labels[v] = u
        rows.append(labels[:])
    return rows


def execute(algo: str, graph: Graph, source: int | None = None) -> Trace:
    """Run ``algo`` on ``graph`` and record predecessor labels after each step."""
    algo = canonical_task(algo)
    if algo in NEEDS_SOURCE:
        if source is None:
            raise MissingSource(f"{algo} needs a source node")
        if not 0 <= source < graph.num_nodes:
            raise ValueError(f"source {source} out of range")
    else:
        source = None
    if algo in NEEDS_DAG and not graph.is_dag():
        raise NotADAG(f"{algo} needs a directed acyclic graph")

    if algo == "bfs":
        rows = _bfs(graph, source)
    elif algo == "dfs":
        rows = _dfs(graph, source)
    elif algo == "bellman_ford":
        rows = _bellman_ford(graph, source)
    elif algo == "dijkstra":
        rows = _greedy_tree(graph, source, prim=False)
    elif algo == "prim":
        if graph.directed:
            raise TraceError("prim needs an undirected graph")
        rows = _greedy_tree(graph, source, prim=True)
    elif algo == "topo_sort":
        rows = _topo_sort(graph)
    else:
        rows = _dag_shortest_paths(graph, source)
    return Trace(algo, source, np.asarray(rows, dtype=np.int64).reshape(len(rows), graph.num_nodes))


def trace_overlap(a: Trace, b: Trace) -> float:
    """Mean fraction of equal labels over aligned rows; the shorter trace is
    padded with its final row."""
    if a.steps.shape[1] != b.steps.shape[1]:
        raise GraphMismatch("traces cover graphs of different sizes")
    rows = max(a.steps.shape[0], b.steps.shape[0])

    def pad(t):
        extra = rows - t.steps.shape[0]
        if extra == 0:
            return t.steps
        return np.vstack([t.steps, np.repeat(t.steps[-1:], extra, axis=0)])

    return float(np.mean(pad(a) == pad(b)))


# --------------------------------------------------------------------------
# datasets


@dataclass
class DatasetConfig:
    n_train: int = 200
    n_val: int = 32
    n_test: int = 32
    nodes_train: int = 8
    nodes_test: int = 16
    p: float = 0.3
    seed: int = 0
    weighted: bool | None = None  # None -> per-task default


@dataclass
class TaskDataset:
    task: str
    config: DatasetConfig
    train: list[tuple[Graph, Trace]] = field(default_factory=list)
    val: list[tuple[Graph, Trace]] = field(default_factory=list)
    test: list[tuple[Graph, Trace]] = field(default_factory=list)

    def split(self, name: str) -> list[tuple[Graph, Trace]]:
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


_SPLIT_IDS = {"train": 0, "val": 1, "test": 2}


def graph_seed(base_seed: int, split: str, index: int) -> int:
    state = np.random.SeedSequence([_seed_int(base_seed) & 0xFFFFFFFF, _seed_int(base_seed) >> 32,
                                    _SPLIT_IDS[split], index]).generate_state(2, dtype=np.uint32)
    return int(state[0]) | (int(state[1]) << 32)


def make_instance(task: str, n: int, p: float, weighted: bool, seed: int) -> tuple[Graph, Trace]:
    dag = task in NEEDS_DAG
    g = gen_er_graph(n, p, weighted=weighted, seed=seed, dag=dag)
    source = None
    if task in NEEDS_SOURCE:
        if dag:
            source = _kahn_order(g)[0]
        else:
            source = int(np.random.default_rng(_seed_int(seed) ^ 0x5EED).integers(n))
    return g, execute(task, g, source)


def make_dataset(task: str, config: DatasetConfig | None = None, **overrides) -> TaskDataset:
    task = canonical_task(task)
    cfg = config or DatasetConfig()
    if overrides:
        cfg = DatasetConfig(**{**asdict(cfg), **overrides})
    for name in ("n_train", "n_val", "n_test"):
        if getattr(cfg, name) < 0:
            raise ValueError(f"{name} must be >= 0")
    if cfg.nodes_train < 1 or cfg.nodes_test < 1:
        raise ValueError("graph sizes must be positive")
    weighted = DEFAULT_WEIGHTED[task] if cfg.weighted is None else cfg.weighted
    ds = TaskDataset(task, cfg)
    sizes = {"train": (cfg.n_train, cfg.nodes_train), "val": (cfg.n_val, cfg.nodes_train),
             "test": (cfg.n_test, cfg.nodes_test)}
    seen = set()
    for split, (count, nodes) in sizes.items():
        items = []
        for i in range(count):
            s = graph_seed(cfg.seed, split, i)
            if s in seen:
                raise RuntimeError("graph seed collision across splits")
            seen.add(s)
            items.append(make_instance(task, nodes, cfg.p, weighted, s))
        setattr(ds, split, items)
    return ds


# --------------------------------------------------------------------------
# serialization


def _record(split: str, graph: Graph, trace: Trace) -> str:
    rec = [
        FORMAT_VERSION,
        trace.task,
        graph.seed,
        graph.num_nodes,
        graph.directed,
        [[u, v, w] for u, v, w in graph.edges],
        trace.source,
        trace.steps.tolist(),
        split,
    ]
    return json.dumps(rec, separators=(",", ":"))


def dumps_dataset(ds: TaskDataset) -> str:
    lines = [_record(split, g, t) for split in ("train", "val", "test") for g, t in ds.split(split)]
    body = "".join(line + "\n" for line in lines)
    header = {
        "version": FORMAT_VERSION,
        "task": ds.task,
        "config": asdict(ds.config),
        "records": len(lines),
        "checksum": hashlib.sha256(body.encode()).hexdigest(),
    }
    return json.dumps(header, sort_keys=True) + "\n" + body


def loads_dataset(text: str, verify: bool = True) -> TaskDataset:
    head, _, body = text.partition("\n")
    header = json.loads(head)
    if header.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported dataset version {header.get('version')}")
    if hashlib.sha256(body.encode()).hexdigest() != header["checksum"]:
        raise ValueError("dataset checksum mismatch")
    ds = TaskDataset(header["task"], DatasetConfig(**header["config"]))
    for line in body.splitlines():
        version, task, seed, n, directed, edges, source, steps, split = json.loads(line)
        g = Graph(n, tuple((int(u), int(v), float(w)) for u, v, w in edges), bool(directed), int(seed))
        t = Trace(task, source, np.asarray(steps, dtype=np.int64).reshape(-1, n))
        if verify and execute(task, g, source) != t:
            raise ValueError(f"trace for graph seed {seed} does not match the reference execution")
        ds.split(split).append((g, t))
    return ds


def write_atomic(path: Path | str, data: str | bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(tmp, mode) as fh:
        fh.write(data)
    tmp.replace(path)


def save_dataset(ds: TaskDataset, path) -> None:
    write_atomic(path, dumps_dataset(ds))


def load_dataset(path, verify: bool = True) -> TaskDataset:
    return loads_dataset(Path(path).read_text(), verify=verify)


def toy_graph() -> Graph:
    """Five-node toy graph (ids 0..4 stand for nodes 1..5)."""
    edges = [(1, 2), (1, 3), (2, 3), (2, 4), (2, 5), (3, 4), (4, 5)]
    return Graph(5, tuple((u - 1, v - 1, 1.0) for u, v in edges))
