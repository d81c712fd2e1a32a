"""Task clustering by a trace-penalized SDP relaxation and threshold rounding."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.csgraph import connected_components

DEFAULT_LAMBDAS = (0.0, 0.01, 0.03, 0.1, 0.3, 1.0)


class NonConvergence(RuntimeError):
    def __init__(self, msg, best=None):
        super().__init__(msg)
        self.best = best


class EmptyGrid(ValueError):
    pass


@dataclass
class AssignmentMatrix:
    X: np.ndarray
    iterations: int
    objective: float
    rowsum_residual: float  # max |Xe - e|
    min_entry: float
    min_eig: float
    converged: bool

    def feasible(self, tol_row=1e-6, tol_neg=1e-9, tol_eig=1e-6) -> bool:
        return self.rowsum_residual <= tol_row and self.min_entry >= -tol_neg and self.min_eig >= -tol_eig


# --------------------------------------------------------------------------
# projections


def proj_psd(X: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((X + X.T) / 2)
    return (vecs * np.maximum(vals, 0.0)) @ vecs.T


def proj_nonneg(X: np.ndarray) -> np.ndarray:
    return np.maximum(X, 0.0)


def proj_rowsum(X: np.ndarray) -> np.ndarray:
    """Nearest symmetric matrix with unit row sums (for symmetric input)."""
    n = X.shape[0]
    e = np.ones(n)
    r = X @ e - e
    s = r.sum() / (2 * n)
    u = (r - s) / n
    return X - np.outer(u, e) - np.outer(e, u)


def project_feasible(Y: np.ndarray, tol: float = 1e-10, max_iter: int = 2000) -> np.ndarray:
    """Dykstra's alternating projections onto {X >= 0} n {X PSD} n {Xe = e}."""
    x = (Y + Y.T) / 2
    p = np.zeros_like(x)
    q = np.zeros_like(x)
    r = np.zeros_like(x)
    for _ in range(max_iter):
        y = proj_psd(x + p)
        p = x + p - y
        z = proj_nonneg(y + q)
        q = y + q - z
        x_new = proj_rowsum(z + r)
        r = z + r - x_new
        change = np.abs(x_new - x).max()
        x = x_new
        if change < tol:
            break
    return x


def _diagnostics(X, A, mu, iterations, converged) -> AssignmentMatrix:
    n = X.shape[0]
    return AssignmentMatrix(
        X=X,
        iterations=iterations,
        objective=float(np.sum(A * X) - mu * np.trace(X)),
        rowsum_residual=float(np.abs(X.sum(axis=1) - 1).max()),
        min_entry=float(X.min()),
        min_eig=float(np.linalg.eigvalsh((X + X.T) / 2).min()) if n else 0.0,
        converged=converged,
    )


def solve_sdp(A, lam: float, L: int, l: int, max_iter: int = 5000, tol: float = 1e-7,
              patience: int = 20, step: float | None = None) -> AssignmentMatrix:
    """Maximize <A, X> - lam (L - l) tr X over {Xe = e, X >= 0, X PSD}.

    Projected gradient ascent; the objective is linear so the gradient is the
    constant A - mu I. Raises NonConvergence carrying the best iterate.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("A must be square")
    if not np.allclose(A, A.T, atol=1e-10) or not np.isfinite(A).all():
        raise ValueError("A must be symmetric and finite")
    if lam < 0 or not 1 <= l <= L:
        raise ValueError("need lam >= 0 and 1 <= l <= L")
    n = A.shape[0]
    mu = lam * (L - l)
    if n == 1:
        return _diagnostics(np.ones((1, 1)), A, mu, 0, True)
    G = A - mu * np.eye(n)
    gnorm = np.linalg.norm(G)
    if gnorm == 0:
        return _diagnostics(np.full((n, n), 1.0 / n), A, mu, 0, True)
    eta = step if step is not None else 1.0 / gnorm
    X = project_feasible(np.eye(n) * 0.5 + 0.5 / n)
    best = _diagnostics(X, A, mu, 0, False)
    prev = best.objective
    quiet = 0
    for it in range(1, max_iter + 1):
        X = project_feasible(X + eta * G)
        obj = float(np.sum(G * X))
        if obj > best.objective:
            best = _diagnostics(X, A, mu, it, False)
        quiet = quiet + 1 if abs(obj - prev) < tol else 0
        prev = obj
        if quiet >= patience:
            best.converged = True
            best.iterations = it
            return best
    raise NonConvergence(f"objective still moving after {max_iter} iterations", best=best)


# --------------------------------------------------------------------------
# rounding and selection


Partition = list  # list of sorted tuples, ordered by smallest member


def canonical(groups) -> Partition:
    return sorted((tuple(sorted(int(x) for x in g)) for g in groups), key=lambda g: g[0])


def round_partition(X, n: int | None = None, tol: float = 1e-6) -> Partition:
    """Connected components of the graph with an edge wherever X[i, j] >= 1/n."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0] if n is None else n
    adj = X >= 1.0 / n - tol
    adj = adj | adj.T
    _, labels = connected_components(adj.astype(np.int8), directed=False)
    groups: dict[int, list[int]] = {}
    for i, c in enumerate(labels):
        groups.setdefault(int(c), []).append(i)
    return canonical(groups.values())


def density(A, groups) -> float:
    """Sum over groups of v^T A v / v^T v for the group's indicator v."""
    A = np.asarray(A, dtype=np.float64)
    total = 0.0
    for g in groups:
        idx = np.asarray(g)
        total += A[np.ix_(idx, idx)].sum() / idx.size
    return float(total)


@dataclass
class Candidate:
    lam: float
    groups: Partition
    density: float
    admissible: bool
    converged: bool


@dataclass
class Selection:
    groups: Partition
    density: float
    candidates: list[Candidate] = field(default_factory=list)

    def audit(self) -> str:
        rows = [{"lambda": c.lam, "groups": c.groups, "density": c.density, "admissible": c.admissible,
                 "converged": c.converged} for c in self.candidates]
        return "\n".join(json.dumps(r) for r in rows) + "\n"


def select_partition(A, lambdas=DEFAULT_LAMBDAS, L: int = 2, l: int = 1, max_growth: float = 5.0,
                     incoming_groups: int = 1) -> Selection:
    """Best-density rounded partition over the lambda grid.

    Candidates with more than ``max_growth * incoming_groups`` groups are
    discarded; ties go to fewer groups, then to the lexicographically smallest
    grouping. When nothing survives the whole set forms one group.
    """
    lambdas = list(lambdas)
    if not lambdas:
        raise EmptyGrid("no lambda values given")
    A = np.asarray(A, dtype=np.float64)
    n = A.shape[0]
    whole = [tuple(range(n))]
    if n == 1:
        return Selection(whole, density(A, whole), [Candidate(lam, whole, density(A, whole), True, True)
                                                    for lam in lambdas])
    cap = max_growth * incoming_groups
    cands = []
    for lam in lambdas:
        try:
            sol = solve_sdp(A, lam, L, l)
        except NonConvergence as exc:
            sol = exc.best
        groups = round_partition(sol.X, n)
        cands.append(Candidate(lam, groups, density(A, groups), len(groups) <= cap, sol.converged))
    ok = [c for c in cands if c.admissible]
    if not ok:
        return Selection(whole, density(A, whole), cands)
    scale = max(1.0, max(abs(c.density) for c in ok))
    top = max(c.density for c in ok)
    tied = [c for c in ok if c.density >= top - 1e-9 * scale]
    pick = min(tied, key=lambda c: (len(c.groups), c.groups))
    return Selection(pick.groups, pick.density, cands)
