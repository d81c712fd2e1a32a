"""Reference implementations used as independent oracles in the tests."""

import heapq
import itertools
from collections import deque

import numpy as np


def adjacency_lists(graph):
    nb = {u: [] for u in range(graph.num_nodes)}
    for u, v, w in graph.edges:
        nb[u].append((v, w))
        if not graph.directed:
            nb[v].append((u, w))
    return {u: sorted(x) for u, x in nb.items()}


def queue_bfs_parents(graph, s):
    nb = adjacency_lists(graph)
    parent = list(range(graph.num_nodes))
    visited = [False] * graph.num_nodes
    visited[s] = True
    q = deque([s])
    while q:
        u = q.popleft()
        for v, _ in nb[u]:
            if not visited[v]:
                visited[v] = True
                parent[v] = u
                q.append(v)
    return parent


def heap_dijkstra(graph, s):
    nb = adjacency_lists(graph)
    dist = {s: 0.0}
    parent = list(range(graph.num_nodes))
    pq = [(0.0, s)]
    closed = set()
    while pq:
        d, u = heapq.heappop(pq)
        if u in closed:
            continue
        closed.add(u)
        for v, w in nb[u]:
            if v not in closed and d + w < dist.get(v, np.inf):
                dist[v] = d + w
                parent[v] = u
                heapq.heappush(pq, (d + w, v))
    return parent, dist


def round_bellman_ford(graph, s):
    n = graph.num_nodes
    arcs = [(u, v, w) for u, v, w in graph.edges]
    if not graph.directed:
        arcs += [(v, u, w) for u, v, w in graph.edges]
    dist = np.full(n, np.inf)
    dist[s] = 0
    parent = np.arange(n)
    for _ in range(n):
        old = dist.copy()
        for u, v, w in sorted(arcs):
            if old[u] + w < dist[v]:
                dist[v] = old[u] + w
                parent[v] = u
    return parent.tolist(), dist


def brute_force_partition(A):
    """Max-density partition by enumerating every set partition."""
    n = A.shape[0]
    best, best_groups = -np.inf, None
    for groups in set_partitions(list(range(n))):
        val = sum(A[np.ix_(g, g)].sum() / len(g) for g in groups)
        if val > best + 1e-12:
            best, best_groups = val, groups
    return best, best_groups


def set_partitions(items):
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in set_partitions(rest):
        for i in range(len(part)):
            yield part[:i] + [[first] + part[i]] + part[i + 1:]
        yield [[first]] + part


def planted_affinity(n, k, margin, rng):
    """Symmetric affinity with ``k`` blocks of at least two tasks each.

    Returns (A, planted groups, gap) where gap is the smallest in-block minus the
    largest cross-block entry after z-scoring; instances are redrawn until the
    gap reaches ``margin``.
    """
    if n < 2 * k:
        raise ValueError("need at least two tasks per block")
    while True:
        A, groups, gap = _planted(n, k, rng)
        if gap >= margin:
            return A, groups, gap


def _planted(n, k, rng):
    labels = np.sort(np.concatenate([np.repeat(np.arange(k), 2), rng.integers(0, k, n - 2 * k)]))
    same = labels[:, None] == labels[None, :]
    A = rng.normal(0, 0.1, (n, n))
    A = (A + A.T) / 2 + np.where(same, 1.0, 0.0)
    A = (A - A.mean()) / A.std()
    np.fill_diagonal(A, A.mean(axis=1))
    groups = [tuple(int(i) for i in np.flatnonzero(labels == c)) for c in range(k)]
    off = ~np.eye(n, dtype=bool)
    gap = A[same & off].min() - A[~same].max() if (same & off).any() else np.inf
    return A, sorted(groups), gap


def pairwise(it):
    return itertools.combinations(it, 2)
