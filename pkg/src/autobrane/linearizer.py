"""Affinity estimation without retraining.

Every pointer prediction is scalarized as the true-class margin
``s_true - logsumexp(s_others)``; its logistic loss is exactly the
cross-entropy. Gradients of the margins at a meta-initialization are sketched
with a Gaussian projection and used as features of a logistic regression whose
optimum stands in for fine-tuning on a task subset.
"""

from __future__ import annotations

import hashlib
import io
import itertools
import json
from math import comb
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import diffcore as dc
from .branchnet import BranchingModel, StepData
from .trainer import as_cache, instance_weights
from .tracegen import write_atomic

FEATURE_VERSION = 1


class DimensionError(ValueError):
    pass


class NonConvergence(RuntimeError):
    def __init__(self, msg, best=None):
        super().__init__(msg)
        self.best = best


class UncoveredPair(ValueError):
    pass


# --------------------------------------------------------------------------
# features


def margins(model: BranchingModel, tape: dc.Tape, batch: StepData, task):
    """True-class margins (N, n) and a mask of rows that have a competitor."""
    logits = model.logits(tape, batch, task)
    cand = batch.candidates()
    true = np.zeros_like(cand)
    np.put_along_axis(true, batch.target[..., None], True, axis=-1)
    others = cand & ~true
    s_true = dc.take_along(logits, batch.target[..., None], axis=-1)
    lse = dc.masked_logsumexp(logits, others, axis=-1)
    m = dc.sub(dc.reshape(s_true, lse.value.shape), lse)
    return m, others.any(axis=-1)


def projection_matrix(p: int, d: int, seed: int) -> np.ndarray:
    """(p, d) matrix with i.i.d. N(0, 1/d) entries."""
    if d > p:
        raise DimensionError(f"projection dimension {d} exceeds parameter dimension {p}")
    rng = np.random.default_rng([seed, p, d])
    return rng.standard_normal((p, d)) / np.sqrt(d)


@dataclass
class ProjectedFeatureSet:
    task: np.ndarray  # (N,) int32 index into ``tasks``
    sample: np.ndarray  # (N,) graph index within the split
    step: np.ndarray  # (N,) step j (predicting row j+1)
    node: np.ndarray  # (N,)
    gt: np.ndarray  # (N, d) sketched gradients
    base: np.ndarray  # (N,) margins at the meta-initialization
    weight: np.ndarray  # (N,) nested-mean weight, sums to <= 1 per task
    gnorm: np.ndarray  # (N,) norm of the unprojected gradient
    tasks: list[str]
    seed: int
    d: int
    l: int

    def __len__(self):
        return self.base.shape[0]

    @property
    def y(self) -> np.ndarray:
        return np.ones(len(self))

    def restrict(self, task_ids) -> "ProjectedFeatureSet":
        rows = np.flatnonzero(np.isin(self.task, np.asarray(list(task_ids))))
        return ProjectedFeatureSet(self.task[rows], self.sample[rows], self.step[rows], self.node[rows],
                                   self.gt[rows], self.base[rows], self.weight[rows], self.gnorm[rows],
                                   self.tasks, self.seed, self.d, self.l)

    # ---- cache file ------------------------------------------------------
    def _body(self) -> bytes:
        ids = np.stack([self.task, self.sample, self.step, self.node], axis=1).astype("<i4")
        return (ids.tobytes() + np.ascontiguousarray(self.gt, dtype="<f8").tobytes()
                + self.base.astype("<f8").tobytes() + self.weight.astype("<f8").tobytes()
                + self.gnorm.astype("<f8").tobytes())

    def to_bytes(self) -> bytes:
        body = self._body()
        head = {"version": FEATURE_VERSION, "seed": self.seed, "d": self.d, "l": self.l, "rows": len(self),
                "tasks": self.tasks, "sha256": hashlib.sha256(body).hexdigest()}
        return json.dumps(head, sort_keys=True).encode() + b"\n" + body

    @classmethod
    def from_bytes(cls, data: bytes) -> "ProjectedFeatureSet":
        nl = data.index(b"\n")
        head = json.loads(data[:nl])
        body = data[nl + 1:]
        if hashlib.sha256(body).hexdigest() != head["sha256"]:
            raise ValueError("feature cache checksum mismatch")
        N, d = head["rows"], head["d"]
        buf = io.BytesIO(body)
        ids = np.frombuffer(buf.read(16 * N), dtype="<i4").reshape(N, 4).astype(np.int64)
        gt = np.frombuffer(buf.read(8 * N * d), dtype="<f8").reshape(N, d).copy()
        base = np.frombuffer(buf.read(8 * N), dtype="<f8").copy()
        weight = np.frombuffer(buf.read(8 * N), dtype="<f8").copy()
        gnorm = np.frombuffer(buf.read(8 * N), dtype="<f8").copy()
        return cls(ids[:, 0], ids[:, 1], ids[:, 2], ids[:, 3], gt, base, weight, gnorm, head["tasks"],
                   head["seed"], d, head["l"])

    def save(self, path) -> None:
        write_atomic(path, self.to_bytes())

    @classmethod
    def load(cls, path) -> "ProjectedFeatureSet":
        return cls.from_bytes(Path(path).read_bytes())


def _limit_graphs(batch: StepData, max_graphs: int | None) -> StepData:
    if max_graphs is None:
        return batch
    keep = np.unique(batch.graph)[:max_graphs]
    return batch.graphs(keep)


def margin_jacobian(model: BranchingModel, batch: StepData, task, cols, chunk: int = 4):
    """Yield (instance rows, node ids, margins, d margin / d W[cols]) per chunk."""
    for start in range(0, len(batch), chunk):
        part = batch.take(np.arange(start, min(start + chunk, len(batch))))
        tape = dc.Tape(model.store)
        m, valid = margins(model, tape, part, task)
        flat = np.flatnonzero(valid)
        if flat.size == 0:
            continue
        jac = tape.jacobian(m, flat)[:, cols]
        inst, node = np.divmod(flat, part.n)
        yield start + inst, node, m.value.ravel()[flat], jac


def extract_features(model: BranchingModel, data, tasks, l: int, d: int = 400, seed: int = 0,
                     split: str = "train", max_graphs: int | None = None, projection=None,
                     chunk: int = 4) -> ProjectedFeatureSet:
    """Sketched margin gradients w.r.t. the parameters ``tasks`` train from layer ``l``.

    ``projection`` overrides the Gaussian matrix (shape (p_U, d)); it exists so
    tests can pass the identity.
    """
    cache = as_cache(data)
    names = [model.tasks[model.task_id(t)] for t in tasks]
    cols = model.coords(names, l)
    if projection is None:
        P = projection_matrix(cols.size, d, seed)
    else:
        P = np.asarray(projection, dtype=np.float64)
        if P.shape[0] != cols.size:
            raise DimensionError(f"projection has {P.shape[0]} rows, need {cols.size}")
        d = P.shape[1]
    parts = {k: [] for k in ("task", "sample", "step", "node", "gt", "base", "weight", "gnorm")}
    for ti, name in enumerate(names):
        batch = _limit_graphs(cache.get(name, split), max_graphs)
        if len(batch) == 0:
            continue
        w_inst = instance_weights(batch)
        # step index of each instance within its graph
        steps = np.zeros(len(batch), dtype=np.int64)
        for g in np.unique(batch.graph):
            rows = np.flatnonzero(batch.graph == g)
            steps[rows] = np.arange(rows.size)
        for inst, node, mval, jac in margin_jacobian(model, batch, name, cols, chunk):
            parts["task"].append(np.full(inst.size, ti))
            parts["sample"].append(batch.graph[inst])
            parts["step"].append(steps[inst])
            parts["node"].append(node)
            parts["gt"].append(jac @ P)
            parts["base"].append(mval)
            parts["weight"].append(w_inst[inst])
            parts["gnorm"].append(np.linalg.norm(jac, axis=1))
    if not parts["gt"]:
        raise ValueError("no feature rows: data is empty")
    cat = {k: np.concatenate(v) for k, v in parts.items()}
    return ProjectedFeatureSet(cat["task"], cat["sample"], cat["step"], cat["node"], cat["gt"], cat["base"],
                               cat["weight"], cat["gnorm"], names, seed, d, l)


# --------------------------------------------------------------------------
# logistic surrogate


def logistic_loss(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, -z)


@dataclass
class NewtonResult:
    w: np.ndarray
    objective: float
    grad_norm: float
    iterations: int


def newton_logistic(X: np.ndarray, b: np.ndarray, c: np.ndarray, lam: float, tol: float = 1e-8,
                    max_iter: int = 200, w0=None) -> NewtonResult:
    """Minimize sum_r c_r log(1 + exp(-(X_r w + b_r))) + lam ||w||^2 by damped Newton."""
    N, d = X.shape
    w = np.zeros(d) if w0 is None else np.array(w0, dtype=np.float64)

    def obj(w):
        return float(c @ logistic_loss(X @ w + b) + lam * w @ w)

    f = obj(w)
    gnorm = np.inf
    for it in range(max_iter + 1):
        z = X @ w + b
        s = expit(-z)  # -dloss/dz
        grad = -(X.T @ (c * s)) + 2 * lam * w
        gnorm = float(np.linalg.norm(grad))
        if gnorm <= tol:
            return NewtonResult(w, f, gnorm, it)
        if it == max_iter:
            break
        curv = c * s * (1.0 - s)
        H = (X.T * curv) @ X
        H[np.diag_indices(d)] += 2 * lam
        try:
            step = -np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = -grad
        slope = float(grad @ step)
        t = 1.0
        while True:
            cand = w + t * step
            fc = obj(cand)
            if fc <= f + 1e-4 * t * slope or t < 1e-12:
                break
            t *= 0.5
        if t < 1e-12 and fc >= f:
            # no descent along Newton direction: rounding floor reached
            break
        w, f = cand, fc
    raise NonConvergence(f"Newton stopped with gradient norm {gnorm:.3e} after {max_iter} iterations",
                         best=NewtonResult(w, f, gnorm, max_iter))


@dataclass
class SurrogateFit:
    subset: tuple
    w: np.ndarray
    train_loss: dict  # task name -> nested-mean surrogate loss on the fit rows
    objective: float
    iterations: int
    grad_norm: float


def _row_coeffs(fs: ProjectedFeatureSet) -> np.ndarray:
    present = np.unique(fs.task)
    return fs.weight / max(present.size, 1)


def fit_surrogate(fs: ProjectedFeatureSet, lam: float = 1e-4, tol: float = 1e-8, max_iter: int = 200,
                  subset=None) -> SurrogateFit:
    """Logistic regression on sketched gradients, tasks weighted equally."""
    if subset is not None:
        fs = fs.restrict(subset)
    if len(fs) == 0:
        raise ValueError("no rows to fit")
    res = newton_logistic(fs.gt, fs.base, _row_coeffs(fs), lam, tol, max_iter)
    present = tuple(int(t) for t in np.unique(fs.task))
    return SurrogateFit(present, res.w, surrogate_losses(fs, res.w), res.objective, res.iterations, res.grad_norm)


def surrogate_losses(fs: ProjectedFeatureSet, w: np.ndarray) -> dict[str, float]:
    """Nested-mean logistic loss per task of the linearized predictor ``w``."""
    loss = fs.weight * logistic_loss(fs.gt @ w + fs.base)
    return {fs.tasks[t]: float(loss[fs.task == t].sum()) for t in np.unique(fs.task)}


# --------------------------------------------------------------------------
# subsets and affinity


@dataclass
class SubsetPlan:
    subsets: list[tuple[int, ...]]
    n: int
    alpha: tuple[int, int]
    seed: int

    def __len__(self):
        return len(self.subsets)

    def pair_counts(self) -> np.ndarray:
        counts = np.zeros((self.n, self.n), dtype=np.int64)
        for s in self.subsets:
            idx = np.array(s)
            counts[np.ix_(idx, idx)] += 1
        return counts


def make_plan(n: int, m: int, alpha=3, seed: int = 0, max_tries: int = 1000) -> SubsetPlan:
    """Subsets of {0..n-1} covering every pair.

    ``alpha`` is a size or an inclusive (lo, hi) range; sizes are clipped to
    [1, n] and the lower end to n - 1 so that small task sets still compare
    subsets of different composition. When there are at most ``m`` subsets of
    admissible size they are all enumerated instead of sampled.
    """
    lo, hi = (alpha, alpha) if np.isscalar(alpha) else (int(alpha[0]), int(alpha[1]))
    if n < 1 or lo < 1 or hi < lo:
        raise ValueError("need n >= 1 and 1 <= lo <= hi")
    if m < 1:
        raise ValueError("need m >= 1")
    hi_n = min(hi, n)
    lo_n = max(1, min(lo, n - 1))
    sizes = range(lo_n, hi_n + 1)
    total = sum(comb(n, k) for k in sizes)
    if total <= m:
        subs = [c for k in sizes for c in itertools.combinations(range(n), k)]
        return SubsetPlan(subs, n, (lo, hi), seed)
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        subs = []
        for _ in range(m):
            k = int(rng.integers(lo_n, hi_n + 1))
            subs.append(tuple(sorted(int(x) for x in rng.choice(n, size=k, replace=False))))
        plan = SubsetPlan(subs, n, (lo, hi), seed)
        if (plan.pair_counts() > 0).all():
            return plan
    raise UncoveredPair(f"no covering plan of {m} subsets found in {max_tries} draws")


@dataclass
class SubsetLossTable:
    plan: SubsetPlan
    losses: dict  # (k, i) -> estimated validation loss of task i after fitting subset k
    fits: dict = field(default_factory=dict)  # subset tuple -> SurrogateFit


def estimate_subset_losses(train_fs: ProjectedFeatureSet, val_fs: ProjectedFeatureSet, plan: SubsetPlan,
                           lam: float = 1e-4, tol: float = 1e-8) -> SubsetLossTable:
    if (train_fs.seed, train_fs.d, train_fs.l, train_fs.tasks) != (val_fs.seed, val_fs.d, val_fs.l, val_fs.tasks):
        raise ValueError("train and validation features come from different projections")
    table = SubsetLossTable(plan, {})
    for k, subset in enumerate(plan.subsets):
        if subset not in table.fits:
            table.fits[subset] = fit_surrogate(train_fs, lam, tol, subset=subset)
        fit = table.fits[subset]
        val = surrogate_losses(val_fs.restrict(subset), fit.w)
        for i in subset:
            table.losses[(k, i)] = val[val_fs.tasks[i]]
    return table


@dataclass
class AffinityMatrix:
    T: np.ndarray
    counts: np.ndarray
    l: int
    tasks: list[str]
    subsets: list = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["task," + ",".join(self.tasks)]
        for name, row in zip(self.tasks, self.T):
            lines.append(name + "," + ",".join(repr(float(x)) for x in row))
        return "\n".join(lines) + "\n"

    @staticmethod
    def read_csv(text: str) -> tuple[list[str], np.ndarray]:
        rows = [ln.split(",") for ln in text.strip().splitlines()]
        tasks = rows[0][1:]
        if [r[0] for r in rows[1:]] != tasks:
            raise ValueError("row and column task names differ")
        return tasks, np.array([[float(x) for x in r[1:]] for r in rows[1:]])


def affinity_matrix(table: SubsetLossTable, tasks: list[str] | None = None, l: int = 1) -> AffinityMatrix:
    """T[i, j] = mean loss of task i over the subsets containing both i and j."""
    plan = table.plan
    n = plan.n
    total = np.zeros((n, n))
    counts = plan.pair_counts()
    for k, subset in enumerate(plan.subsets):
        for i in subset:
            if (k, i) not in table.losses:
                raise KeyError(f"missing loss for subset {k}, task {i}")
            for j in subset:
                total[i, j] += table.losses[(k, i)]
    if (counts == 0).any():
        i, j = np.argwhere(counts == 0)[0]
        raise UncoveredPair(f"tasks {i} and {j} never share a subset")
    tasks = tasks if tasks is not None else [str(i) for i in range(n)]
    return AffinityMatrix(total / counts, counts, l, list(tasks), list(plan.subsets))


def _zscore(x: np.ndarray, axis=None) -> np.ndarray:
    mu = x.mean(axis=axis, keepdims=axis is not None)
    sd = x.std(axis=axis, keepdims=axis is not None)
    sd = np.where(sd < 1e-12, 1.0, sd)
    return (x - mu) / sd


def to_clusterer_affinity(T: np.ndarray, row_normalize: bool = True) -> np.ndarray:
    """Affinity for the clusterer from the loss-valued T (lower loss = closer).

    With three or more tasks each row is standardized over its off-diagonal
    entries and the diagonal is set to the neutral value 0, so every task's
    preferences count equally regardless of its loss level. The matrix is then
    symmetrized, negated and z-scored over all entries.
    """
    T = np.asarray(T, dtype=np.float64)
    n = T.shape[0]
    if n == 1:
        return np.zeros_like(T)
    if row_normalize and n >= 3:
        off = ~np.eye(n, dtype=bool)
        vals = T[off].reshape(n, n - 1)
        mu = vals.mean(axis=1, keepdims=True)
        sd = vals.std(axis=1, keepdims=True)
        sd = np.where(sd < 1e-12, 1.0, sd)
        T = (T - mu) / sd
        T[~off] = 0.0
    A = -(T + T.T) / 2.0
    if A.std() < 1e-12:
        return np.zeros_like(A)
    return _zscore(A)


# --------------------------------------------------------------------------
# linearization residual


RSS_EDGES = (0.02, 0.04, 0.06, 0.08, 0.10)


def _candidate_logit_jacobian(model, batch, task, cols, chunk):
    for start in range(0, len(batch), chunk):
        part = batch.take(np.arange(start, min(start + chunk, len(batch))))
        tape = dc.Tape(model.store)
        lg = model.logits(tape, part, task)
        cand = part.candidates()
        flat = np.flatnonzero(cand)
        jac = tape.jacobian(lg, flat)[:, cols]
        inst = flat // (part.n * part.n)
        yield start + inst, start * part.n * part.n + flat, lg.value.ravel()[flat], jac


@dataclass
class RSSRecord:
    rel_dist: float
    rss: float
    label: str = ""


def rss_records(base: BranchingModel, snapshots, data, tasks, l: int, split: str = "val",
                max_graphs: int | None = None, chunk: int = 2, labels=None) -> list[RSSRecord]:
    """Linearization residual of every snapshot's candidate logits around ``base``.

    Each snapshot is a flat parameter vector in ``base``'s layout that differs
    from it only on the coordinates ``tasks`` train from layer ``l``. The ratio
    ``||f_W - f_W0 - J (W - W0)||^2 / ||f_W||^2`` is averaged over steps of a
    graph, then graphs, then tasks.
    """
    cache = as_cache(data)
    names = [base.tasks[base.task_id(t)] for t in tasks]
    cols = base.coords(names, l)
    w0 = base.store.vector
    deltas = []
    dists = []
    for vec in snapshots:
        vec = np.asarray(vec, dtype=np.float64)
        moved = np.flatnonzero(vec != w0)
        if np.setdiff1d(moved, cols).size:
            raise ValueError("snapshot moves parameters outside the linearized coordinates")
        deltas.append((vec - w0)[cols])
        norm = np.linalg.norm(vec[cols])
        dists.append(float(np.linalg.norm(deltas[-1]) / norm) if norm > 0 else 0.0)
    D = np.stack(deltas, axis=1) if deltas else np.zeros((cols.size, 0))
    K = D.shape[1]
    per_task = np.zeros((len(names), K))
    moved_models = []
    for vec in snapshots:
        m = base.copy()
        m.store.vector = np.asarray(vec, dtype=np.float64).copy()
        moved_models.append(m)
    for ti, name in enumerate(names):
        batch = _limit_graphs(cache.get(name, split), max_graphs)
        if len(batch) == 0:
            continue
        graphs = np.unique(batch.graph)
        num = np.zeros((len(batch), K))
        den = np.zeros((len(batch), K))
        f_moved = [m.forward_numpy(batch, name) for m in moved_models]
        for inst, flat, f0, jac in _candidate_logit_jacobian(base, batch, name, cols, chunk):
            lin = jac @ D  # (rows, K)
            for k in range(K):
                fw = f_moved[k].ravel()[flat]
                r = fw - f0 - lin[:, k]
                np.add.at(num[:, k], inst, r * r)
                np.add.at(den[:, k], inst, fw * fw)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(den > 0, num / den, 0.0)
        w = batch.step_weight / graphs.size
        per_task[ti] = w @ ratio
    rss = per_task.mean(axis=0)
    labels = labels if labels is not None else [""] * K
    return [RSSRecord(dists[k], float(rss[k]), labels[k]) for k in range(K)]


def bucket_rss(records: list[RSSRecord], edges=RSS_EDGES) -> list[dict]:
    """Mean and standard deviation of RSS per relative-distance bucket (lo, hi]."""
    out = []
    lo = 0.0
    for hi in edges:
        vals = np.array([r.rss for r in records if lo < r.rel_dist <= hi])
        out.append({"lo": lo, "hi": hi, "count": int(vals.size),
                    "mean": float(vals.mean()) if vals.size else float("nan"),
                    "std": float(vals.std()) if vals.size else float("nan")})
        lo = hi
    return out


def measure_rss(model: BranchingModel, base: BranchingModel, data, tasks, l: int, split: str = "val",
                max_graphs: int | None = None) -> list[dict]:
    """Bucketed RSS of one fine-tuned model around ``base``."""
    return bucket_rss(rss_records(base, [model.store.vector], data, tasks, l, split, max_graphs))


# --------------------------------------------------------------------------
# surrogate-vs-retraining gap


def jl_epsilon(num_points: int, d: int) -> float:
    """Inner-product distortion guaranteed w.h.p. by a d-dimensional Gaussian sketch
    of ``num_points`` vectors (d >= 8 ln(N) / eps^2)."""
    return float(np.sqrt(8.0 * np.log(max(num_points, 2)) / d))


@dataclass
class GapReport:
    surrogate_loss: float  # true loss at the surrogate's solution
    oracle_loss: float  # lowest loss found by direct optimization
    gap: float
    G: float  # largest per-row gradient norm
    D: float  # largest displacement among the compared solutions
    delta_hat: float  # mean |linearization residual| of the margins
    eps: float  # JL-implied distortion at the chosen d
    eps_measured: float  # observed distortion against the oracle displacement
    bound: float
    holds: bool
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("surrogate_loss", "oracle_loss", "gap", "G", "D", "delta_hat", "eps",
                                              "eps_measured", "bound", "holds")} | self.extra


def verify_gap(surrogate_loss: float, oracle_loss: float, G: float, D: float, eps: float, delta_hat: float,
                 eps_measured: float = float("nan"), tol: float = 0.0, **extra) -> GapReport:
    """Check ``surrogate_loss <= oracle_loss + 2 delta_hat + 2 G D eps + tol``."""
    gap = surrogate_loss - oracle_loss
    bound = 2 * delta_hat + 2 * G * D * eps
    return GapReport(surrogate_loss, oracle_loss, gap, G, D, delta_hat, eps, eps_measured, bound,
                       bool(gap <= bound + tol), extra)


def weighted_logistic(margins_: np.ndarray, c: np.ndarray) -> float:
    return float(c @ logistic_loss(margins_))


def gap_check_linear(X: np.ndarray, c0: np.ndarray, weights: np.ndarray, d: int, lam: float = 1e-8,
                 seed: int = 0, projection=None) -> GapReport:
    """Gap check on a model whose margins are exactly ``X w + c0``.

    The surrogate optimizes over ``w = P w_d``; the oracle over all of R^p.
    """
    X = np.asarray(X, dtype=np.float64)
    N, p = X.shape
    P = projection_matrix(p, d, seed) if projection is None else np.asarray(projection, dtype=np.float64)
    sur = newton_logistic(X @ P, c0, weights, lam)
    w_hat = P @ sur.w
    orc = newton_logistic(X, c0, weights, lam)
    w_star = orc.w
    l_hat = weighted_logistic(X @ w_hat + c0, weights)
    l_star = weighted_logistic(X @ w_star + c0, weights)
    # residual of the first-order expansion; zero up to rounding for this model
    resid = np.abs((X @ w_star + c0) - c0 - X @ w_star)
    gn = np.linalg.norm(X, axis=1)
    G = float(gn.max())
    D = float(max(np.linalg.norm(w_hat), np.linalg.norm(w_star)))
    ds = np.linalg.norm(w_star)
    eps_meas = float(np.max(np.abs((X @ P) @ (P.T @ w_star) - X @ w_star) / np.maximum(gn * ds, 1e-300)))
    eps = jl_epsilon(N + 1, P.shape[1])
    return verify_gap(l_hat, l_star, G, D, eps, float(resid.mean()), eps_meas, tol=1e-6,
                        d=int(P.shape[1]), p=p, rows=N)
