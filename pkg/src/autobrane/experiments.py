"""Experiment recipes: configs, baselines, residual/gap diagnostics, sweeps, reports."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from . import diffcore as dc
from . import linearizer as lin
from .brane import BraneConfig, autobrane
from .branchnet import BranchingModel, new_chain
from .clusterer import DEFAULT_LAMBDAS
from .trainer import StepCache, TrainConfig, evaluate, objective, train
from .tracegen import DatasetConfig, canonical_task, make_dataset, write_atomic


class TargetUnreached(RuntimeError):
    def __init__(self, msg, result=None):
        super().__init__(msg)
        self.result = result


# --------------------------------------------------------------------------
# config


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes"):
        return True
    if low in ("0", "false", "no"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


@dataclass
class ExperimentConfig:
    tasks: tuple = ("bfs", "bellman_ford", "dfs", "dijkstra")
    n_train: int = 100
    n_val: int = 32
    n_test: int = 32
    nodes_train: int = 8
    nodes_test: int = 16
    p: float = 0.3
    weighted: bool | None = None  # None: per-task default
    data_seed: int = 0
    L: int = 3
    h: int = 32
    m: int = 40
    alpha: tuple = (2, 3)
    d: int = 400
    lam2: float = 1e-2
    lambdas: tuple = DEFAULT_LAMBDAS
    max_growth: float = 5.0
    lr: float = 3e-3
    epochs: int = 30
    batch_size: int = 16
    patience: int = 10
    meta_epochs: int = 10
    feature_graphs: int | None = 50
    seed: int = 0
    out_dir: str = "runs"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        self.tasks = tuple(canonical_task(t) for t in self.tasks)
        if not self.tasks or len(set(self.tasks)) != len(self.tasks):
            raise ValueError("tasks must be a nonempty list without duplicates")
        for name in ("n_val", "n_test", "nodes_train", "nodes_test", "L", "h", "m", "d", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_train < 0 or self.epochs < 0 or self.meta_epochs < 0:
            raise ValueError("n_train, epochs and meta_epochs must be >= 0")
        if not 0 <= self.p <= 1:
            raise ValueError("p must lie in [0, 1]")
        if self.lr <= 0 or self.lam2 < 0 or self.max_growth < 1:
            raise ValueError("need lr > 0, lam2 >= 0, max_growth >= 1")
        alpha = (self.alpha, self.alpha) if np.isscalar(self.alpha) else tuple(int(a) for a in self.alpha)
        if len(alpha) != 2 or not 1 <= alpha[0] <= alpha[1]:
            raise ValueError("alpha must be a size or a range lo,hi with 1 <= lo <= hi")
        self.alpha = alpha
        self.lambdas = tuple(float(x) for x in self.lambdas)
        if not self.lambdas or min(self.lambdas) < 0:
            raise ValueError("lambdas must be a nonempty list of nonnegative values")

    # ---- derived configs ---------------------------------------------------
    def dataset_config(self) -> DatasetConfig:
        return DatasetConfig(self.n_train, self.n_val, self.n_test, self.nodes_train, self.nodes_test, self.p,
                             self.data_seed, self.weighted)

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, epochs=self.epochs, batch_size=self.batch_size, seed=self.seed,
                           patience=self.patience)

    def brane_config(self) -> BraneConfig:
        return BraneConfig(L=self.L, h=self.h, seed=self.seed, m=self.m, alpha=self.alpha, d=self.d,
                           lam2=self.lam2, lambdas=self.lambdas, max_growth=self.max_growth,
                           train=self.train_config(), meta_epochs=self.meta_epochs,
                           feature_graphs=self.feature_graphs)

    # ---- key=value text ------------------------------------------------------
    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (tuple, list)):
                v = ",".join(str(x) for x in v)
            elif v is None:
                v = "none"
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        kw = {}
        for ln in text.splitlines():
            ln = ln.split("#", 1)[0].strip()
            if not ln:
                continue
            if "=" not in ln:
                raise ValueError(f"expected key=value, got {ln!r}")
            k, v = (x.strip() for x in ln.split("=", 1))
            kw[k] = v
        return cls.from_strings(kw)

    @classmethod
    def from_strings(cls, kw: dict) -> "ExperimentConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        out = {}
        for k, v in kw.items():
            if k not in fields:
                raise ValueError(f"unknown config key {k!r}")
            if not isinstance(v, str):
                out[k] = v
                continue
            default = fields[k].default
            if k in ("tasks",):
                out[k] = tuple(x.strip() for x in v.split(",") if x.strip())
            elif k in ("alpha", "lambdas"):
                out[k] = tuple(float(x) if k == "lambdas" else int(x) for x in v.split(","))
            elif k in ("weighted",):
                out[k] = None if v.lower() == "none" else _parse_bool(v)
            elif k in ("feature_graphs",):
                out[k] = None if v.lower() == "none" else int(v)
            elif isinstance(default, bool):
                out[k] = _parse_bool(v)
            elif isinstance(default, int):
                out[k] = int(v)
            elif isinstance(default, float):
                out[k] = float(v)
            else:
                out[k] = v
        return cls(**out)


def build_datasets(cfg: ExperimentConfig) -> dict:
    dcfg = cfg.dataset_config()
    return {t: make_dataset(t, dcfg) for t in cfg.tasks}


# --------------------------------------------------------------------------
# baselines and scoring


@dataclass
class RunResult:
    method: str
    scores: dict  # task -> test accuracy
    train_calls: int
    module_count: int
    L: int
    models: dict = field(default_factory=dict)  # label -> BranchingModel

    @property
    def mean_score(self) -> float:
        return float(np.mean(list(self.scores.values())))

    @property
    def memory_ratio(self) -> float:
        return self.module_count / self.L

    def row(self) -> dict:
        return {"method": self.method, "mean_acc": self.mean_score, "train_calls": self.train_calls,
                "module_count": self.module_count, "memory_ratio": self.memory_ratio,
                **{f"acc_{t}": a for t, a in self.scores.items()}}


def run_stn(cfg: ExperimentConfig, data) -> RunResult:
    """One independent chain per task."""
    cache = data if isinstance(data, StepCache) else StepCache(data)
    scores, models = {}, {}
    for t in cfg.tasks:
        m = train(new_chain([t], cfg.L, cfg.h, cfg.seed), cache, [t], cfg.train_config()).model
        scores[t] = evaluate(m, cache, [t], "test")[t]["acc"]
        models[t] = m
    return RunResult("stn", scores, len(cfg.tasks), sum(m.module_count() for m in models.values()), cfg.L, models)


def run_mtn(cfg: ExperimentConfig, data) -> RunResult:
    """One shared chain trained on the multitask objective."""
    cache = data if isinstance(data, StepCache) else StepCache(data)
    m = train(new_chain(list(cfg.tasks), cfg.L, cfg.h, cfg.seed), cache, list(cfg.tasks), cfg.train_config()).model
    res = evaluate(m, cache, list(cfg.tasks), "test")
    return RunResult("mtn", {t: r["acc"] for t, r in res.items()}, 1, m.module_count(), cfg.L, {"mtn": m})


def run_baselines(cfg: ExperimentConfig, data) -> dict[str, RunResult]:
    return {"stn": run_stn(cfg, data), "mtn": run_mtn(cfg, data)}


def run_brane(cfg: ExperimentConfig, data, out_dir=None) -> tuple[RunResult, object]:
    cache = data if isinstance(data, StepCache) else StepCache(data)
    model, state = autobrane(cache, list(cfg.tasks), cfg.brane_config(), out_dir)
    res = evaluate(model, cache, list(cfg.tasks), "test")
    return RunResult("brane", {t: r["acc"] for t, r in res.items()}, state.train_calls, model.module_count(),
                     cfg.L, {"brane": model}), state


def table_csv(rows: list[dict]) -> str:
    keys: list[str] = []
    for r in rows:
        keys.extend(k for k in r if k not in keys)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def report(run_dirs) -> list[dict]:
    """Collect summary.csv rows from run directories into one comparison table."""
    rows = []
    for d in run_dirs:
        path = Path(d) / "summary.csv"
        if not path.exists():
            raise FileNotFoundError(f"{path} missing")
        for r in read_csv(path):
            rows.append({"run": str(d), **r})
    return rows


# --------------------------------------------------------------------------
# subset plan helpers


def random_subsets(n: int, count: int, sizes=(1, 3), seed: int = 0) -> list[tuple[int, ...]]:
    rng = np.random.default_rng(seed)
    lo, hi = sizes
    hi = min(hi, n)
    out = []
    for _ in range(count):
        k = int(rng.integers(min(lo, hi), hi + 1))
        out.append(tuple(sorted(int(x) for x in rng.choice(n, size=k, replace=False))))
    return out


def fine_tune_cfg(cfg: ExperimentConfig, epochs: int, lr: float) -> TrainConfig:
    return TrainConfig(lr=lr, epochs=epochs, batch_size=cfg.batch_size, seed=cfg.seed, patience=cfg.patience,
                       frozen_layers=0, freeze_encoder=True)


# --------------------------------------------------------------------------
# linearization residual (RSS) experiment


def rss_experiment(cfg: ExperimentConfig, data, base: BranchingModel, n_subsets: int = 20, l: int = 1,
                   epochs: int = 6, lr: float = 1e-3, max_graphs: int = 12) -> list[lin.RSSRecord]:
    """Fine-tune ``base`` on random task subsets and record RSS along each trajectory."""
    cache = data if isinstance(data, StepCache) else StepCache(data)
    records = []
    for k, sub in enumerate(random_subsets(len(cfg.tasks), n_subsets, (1, 3), cfg.seed)):
        names = [cfg.tasks[i] for i in sub]
        snaps = []
        tcfg = fine_tune_cfg(cfg, epochs, lr)
        tcfg.frozen_layers = l - 1
        train(base, cache, names, tcfg, on_epoch=lambda e, m: snaps.append(m.store.vector.copy()))
        labels = [f"{k}:{'+'.join(names)}:e{e + 1}" for e in range(len(snaps))]
        records += lin.rss_records(base, snaps, cache, names, l, "val", max_graphs, labels=labels)
    return records


# --------------------------------------------------------------------------
# affinity estimate vs retraining


@dataclass
class OracleComparison:
    keys: list  # (subset, task) pairs
    estimated: np.ndarray
    retrained: np.ndarray

    @property
    def rel_err(self) -> np.ndarray:
        return np.abs(self.estimated - self.retrained) / np.abs(self.retrained)

    @property
    def median_rel_err(self) -> float:
        return float(np.median(self.rel_err))

    @property
    def spearman(self) -> float:
        return float(spearmanr(self.estimated, self.retrained)[0])


def affinity_oracle(cfg: ExperimentConfig, data, meta: BranchingModel, l: int = 1, oracle_epochs: int = 10,
                    oracle_lr: float = 1e-3, plan_seed: int | None = None):
    """Estimated vs retrained validation loss for every (subset, task) of a plan."""
    cache = data if isinstance(data, StepCache) else StepCache(data)
    names = list(cfg.tasks)
    ftr = lin.extract_features(meta, cache, names, l, cfg.d, cfg.seed, "train", cfg.feature_graphs)
    fva = lin.extract_features(meta, cache, names, l, cfg.d, cfg.seed, "val", cfg.feature_graphs)
    plan = lin.make_plan(len(names), cfg.m, cfg.alpha, cfg.seed if plan_seed is None else plan_seed)
    table = lin.estimate_subset_losses(ftr, fva, plan, cfg.lam2)
    truth = {}
    for sub in sorted(set(plan.subsets)):
        sub_names = [names[i] for i in sub]
        tcfg = fine_tune_cfg(cfg, oracle_epochs, oracle_lr)
        tcfg.frozen_layers = l - 1
        model = train(meta, cache, sub_names, tcfg).model
        ev = evaluate(model, cache, sub_names, "val")
        for i in sub:
            truth[(sub, i)] = ev[names[i]]["loss"]
    keys = sorted(table.losses)
    est = np.array([table.losses[k] for k in keys])
    tru = np.array([truth[(plan.subsets[k], i)] for k, i in keys])
    return OracleComparison([(plan.subsets[k], names[i]) for k, i in keys], est, tru), table


# --------------------------------------------------------------------------
# surrogate-vs-retraining gap on the network


def _scatter(base: BranchingModel, cols: np.ndarray, delta: np.ndarray) -> BranchingModel:
    m = base.copy()
    m.store.vector[cols] += delta
    return m


def margin_residual(base: BranchingModel, moved: BranchingModel, data, tasks, l: int, split: str,
                    max_graphs: int | None) -> float:
    """Mean |m_W - m_W0 - g^T (W - W0)| over margin rows."""
    cache = data if isinstance(data, StepCache) else StepCache(data)
    names = [base.tasks[base.task_id(t)] for t in tasks]
    cols = base.coords(names, l)
    delta = (moved.store.vector - base.store.vector)[cols]
    total, count = 0.0, 0
    for name in names:
        batch = lin._limit_graphs(cache.get(name, split), max_graphs)
        m_moved, valid = lin.margins(moved, dc.Tape(moved.store), batch, name)
        mv = m_moved.value[valid]
        pos = 0
        for inst, node, m0, jac in lin.margin_jacobian(base, batch, name, cols):
            k = m0.size
            total += float(np.abs(mv[pos:pos + k] - m0 - jac @ delta).sum())
            count += k
            pos += k
    return total / max(count, 1)


def gap_check_network(cfg: ExperimentConfig, data, meta: BranchingModel, tasks=None, l: int = 1,
                  oracle_epochs: int = 10, oracle_lr: float = 1e-3, lam2: float | None = None,
                  max_graphs: int | None = 16) -> lin.GapReport:
    """Gap between the materialized surrogate solution and direct fine-tuning on the training loss."""
    cache = data if isinstance(data, StepCache) else StepCache(data)
    names = [canonical_task(t) for t in (tasks or cfg.tasks)]
    cols = meta.coords(names, l)
    d = min(cfg.d, cols.size)
    P = lin.projection_matrix(cols.size, d, cfg.seed)
    ftr = lin.extract_features(meta, cache, names, l, d, cfg.seed, "train", max_graphs, projection=P)
    fit = lin.fit_surrogate(ftr, cfg.lam2 if lam2 is None else lam2)
    w_hat = _scatter(meta, cols, P @ fit.w)
    sub_cache = StepCache({n: _truncate(cache.datasets[n], max_graphs) for n in names})
    tcfg = fine_tune_cfg(cfg, oracle_epochs, oracle_lr)
    tcfg.frozen_layers = l - 1
    oracle = train(meta, sub_cache, names, tcfg).model
    l_hat = objective(w_hat, sub_cache, names, "train")
    l_star = min(objective(oracle, sub_cache, names, "train"), objective(meta, sub_cache, names, "train"))
    delta = (oracle.store.vector - meta.store.vector)[cols]
    D = float(max(np.linalg.norm(P @ fit.w), np.linalg.norm(delta)))
    G = float(ftr.gnorm.max())
    delta_hat = max(margin_residual(meta, oracle, cache, names, l, "train", max_graphs),
                    margin_residual(meta, w_hat, cache, names, l, "train", max_graphs))
    # distortion of <g, delta> under the sketch, measured on the feature rows
    proj_delta = P.T @ delta
    exact = []
    for name in names:
        batch = lin._limit_graphs(cache.get(name, "train"), max_graphs)
        for _, _, _, jac in lin.margin_jacobian(meta, batch, name, cols):
            exact.append(jac @ delta)
    exact = np.concatenate(exact)
    eps_meas = float(np.max(np.abs(ftr.gt @ proj_delta - exact) / np.maximum(ftr.gnorm * np.linalg.norm(delta),
                                                                            1e-300)))
    eps = lin.jl_epsilon(len(ftr) + 1, d)
    return lin.verify_gap(l_hat, l_star, G, D, eps, delta_hat, eps_meas, d=d, p=int(cols.size), rows=len(ftr))


def _truncate(ds, max_graphs):
    if max_graphs is None:
        return ds
    return dataclasses.replace(ds, train=ds.train[:max_graphs], val=ds.val[:max_graphs])


# --------------------------------------------------------------------------
# sample complexity


@dataclass
class SweepResult:
    task: str
    target_err: float
    sizes: list
    val_err: list  # validation pointer error per size
    minimal: int | None


def _pointer_error(tasks, task, size, cfg: ExperimentConfig) -> float:
    dcfg = dataclasses.replace(cfg.dataset_config(), n_train=size)
    data = StepCache({t: make_dataset(t, dcfg) for t in tasks})
    model = train(new_chain(tasks, cfg.L, cfg.h, cfg.seed), data, tasks, cfg.train_config()).model
    return 1.0 - evaluate(model, data, [task], "val")[task]["acc"]


def sample_complexity_sweep(task, target_err: float, sizes, cfg: ExperimentConfig, joint_tasks=None,
                            raise_unreached: bool = True) -> SweepResult:
    """Smallest training-set size whose validation pointer error is below ``target_err``.

    Every size is trained so the full error curve is reported. With
    ``joint_tasks`` a shared chain is trained on all of them (the multitask
    variant) and ``task``'s error is read off it.
    """
    sizes = list(sizes)
    if sizes != sorted(sizes) or not sizes:
        raise ValueError("sizes must be a nonempty ascending list")
    task = canonical_task(task)
    tasks = [canonical_task(t) for t in (joint_tasks or [task])]
    if task not in tasks:
        raise ValueError("task must be one of joint_tasks")
    errs = [_pointer_error(tasks, task, size, cfg) for size in sizes]
    minimal = next((s for s, e in zip(sizes, errs) if e < target_err), None)
    res = SweepResult(task, target_err, sizes, errs, minimal)
    if minimal is None and raise_unreached:
        raise TargetUnreached(f"{task}: best validation error {min(errs):.4f} >= {target_err}", res)
    return res


def mt_vs_st(tasks, size: int, cfg: ExperimentConfig) -> dict[str, dict]:
    """Validation pointer error of each task trained alone and inside one shared chain."""
    tasks = [canonical_task(t) for t in tasks]
    dcfg = dataclasses.replace(cfg.dataset_config(), n_train=size)
    data = StepCache({t: make_dataset(t, dcfg) for t in tasks})
    mt = train(new_chain(tasks, cfg.L, cfg.h, cfg.seed), data, tasks, cfg.train_config()).model
    mt_eval = evaluate(mt, data, tasks, "val")
    out = {}
    for t in tasks:
        st = train(new_chain([t], cfg.L, cfg.h, cfg.seed), data, [t], cfg.train_config()).model
        out[t] = {"st_err": 1.0 - evaluate(st, data, [t], "val")[t]["acc"], "mt_err": 1.0 - mt_eval[t]["acc"]}
    return out


def sweep_csv(results: list[SweepResult]) -> str:
    rows = []
    for r in results:
        for s, e in zip(r.sizes, r.val_err):
            rows.append({"task": r.task, "size": s, "val_err": e, "target": r.target_err,
                         "minimal": "" if r.minimal is None else r.minimal})
    return table_csv(rows)


def write_json(path, obj) -> None:
    write_atomic(path, json.dumps(obj, indent=1, sort_keys=True, default=float) + "\n")
