"""Command-line entry point.

Exit codes: 0 ok, 1 usage error, 2 runtime error. Errors are printed as a
single ``error: <Type>: <message>`` line on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from . import linearizer as lin
from .branchnet import BranchingModel, new_chain, to_dot
from .clusterer import select_partition
from .trainer import StepCache, evaluate, train, train_meta_init, write_curve
from .tracegen import DatasetConfig, make_dataset, save_dataset, write_atomic

OUT_ENV = "AUTOBRANE_OUT"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value experiment config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or the config's out_dir)")


def load_config(args) -> ex.ExperimentConfig:
    kw = {}
    if args.config:
        text = Path(args.config).read_text()
        cfg = ex.ExperimentConfig.from_text(text)
        kw = {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        kw[k.strip()] = v.strip()
    try:
        return ex.ExperimentConfig.from_strings(kw)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def out_dir(args, cfg: ex.ExperimentConfig | None = None) -> Path:
    base = args.out or os.environ.get(OUT_ENV) or (cfg.out_dir if cfg else "runs")
    path = Path(base)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_config(out: Path, cfg: ex.ExperimentConfig) -> None:
    write_atomic(out / "config.txt", cfg.to_text())


# --------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> None:
    tasks = args.task or ["bfs"]
    dcfg = DatasetConfig(args.n_train, args.n_val, args.n_test, args.nodes_train, args.nodes_test, args.p,
                         args.seed, None if args.weighted is None else args.weighted == "yes")
    out = out_dir(args)
    for t in tasks:
        ds = make_dataset(t, dcfg)
        path = out / f"{ds.task}.jsonl"
        save_dataset(ds, path)
        print(path)


def cmd_train(args) -> None:
    cfg = load_config(args)
    out = out_dir(args, cfg)
    _write_config(out, cfg)
    data = StepCache(ex.build_datasets(cfg))
    if args.mode == "stn":
        res = ex.run_stn(cfg, data)
    elif args.mode == "mtn":
        res = ex.run_mtn(cfg, data)
    else:
        if not args.tree:
            raise UsageError("--mode tree needs --tree DIR")
        model = BranchingModel.load(args.tree)
        r = train(model, data, model.tasks, cfg.train_config())
        write_curve(r.curve, out / "curve.csv")
        scores = evaluate(r.model, data, model.tasks, "test")
        res = ex.RunResult("tree", {t: v["acc"] for t, v in scores.items()}, 1, r.model.module_count(), model.L,
                           {"tree": r.model})
    for label, m in res.models.items():
        m.save(out / f"model_{label}")
        write_atomic(out / f"tree_{label}.dot", to_dot(m))
    write_atomic(out / "summary.csv", ex.table_csv([res.row()]))
    print(ex.table_csv([res.row()]), end="")


def cmd_affinity(args) -> None:
    cfg = load_config(args)
    out = out_dir(args, cfg)
    _write_config(out, cfg)
    data = StepCache(ex.build_datasets(cfg))
    l = args.layer
    model = new_chain(list(cfg.tasks), cfg.L, cfg.h, cfg.seed)
    meta = train_meta_init(model, data, list(cfg.tasks), l, cfg.brane_config().meta_cfg()).model
    names = list(cfg.tasks)
    ftr = lin.extract_features(meta, data, names, l, cfg.d, cfg.seed, "train", cfg.feature_graphs)
    fva = lin.extract_features(meta, data, names, l, cfg.d, cfg.seed, "val", cfg.feature_graphs)
    ftr.save(out / "features_train.bin")
    fva.save(out / "features_val.bin")
    plan = lin.make_plan(len(names), cfg.m, cfg.alpha, cfg.seed)
    table = lin.estimate_subset_losses(ftr, fva, plan, cfg.lam2)
    aff = lin.affinity_matrix(table, names, l)
    write_atomic(out / "affinity.csv", aff.to_csv())
    write_atomic(out / "subsets.jsonl", "".join(json.dumps({"subset": list(s), "losses": {
        names[i]: table.losses[(k, i)] for i in s}}) + "\n" for k, s in enumerate(plan.subsets)))
    print(aff.to_csv(), end="")


def cmd_cluster(args) -> None:
    tasks, T = lin.AffinityMatrix.read_csv(Path(args.csv).read_text())
    A = T if args.raw else lin.to_clusterer_affinity(T)
    lambdas = [float(x) for x in args.lambdas.split(",")] if args.lambdas else None
    sel = select_partition(A, lambdas if lambdas is not None else ex.DEFAULT_LAMBDAS, args.L, args.layer,
                           args.max_growth)
    groups = [[tasks[i] for i in g] for g in sel.groups]
    out = out_dir(args)
    write_atomic(out / "partition.json", json.dumps({"groups": groups, "density": sel.density}, indent=1) + "\n")
    write_atomic(out / "candidates.jsonl", sel.audit())
    print(json.dumps({"groups": groups, "density": sel.density}))


def cmd_brane(args) -> None:
    cfg = load_config(args)
    out = out_dir(args, cfg)
    _write_config(out, cfg)
    data = StepCache(ex.build_datasets(cfg))
    res, state = ex.run_brane(cfg, data, out)
    write_atomic(out / "tree.dot", to_dot(res.models["brane"]))
    write_atomic(out / "summary.csv", ex.table_csv([res.row()]))
    print(ex.table_csv([res.row()]), end="")


def cmd_eval(args) -> None:
    cfg = load_config(args)
    out = out_dir(args, cfg)
    data = StepCache(ex.build_datasets(cfg))
    model = BranchingModel.load(args.model)
    res = evaluate(model, data, model.tasks, args.split)
    rows = [{"task": t, "acc": v["acc"], "loss": v["loss"]} for t, v in res.items()]
    write_atomic(out / "scores.csv", ex.table_csv(rows))
    print(ex.table_csv(rows), end="")


def cmd_rss(args) -> None:
    cfg = load_config(args)
    out = out_dir(args, cfg)
    _write_config(out, cfg)
    data = StepCache(ex.build_datasets(cfg))
    base = train(new_chain(list(cfg.tasks), cfg.L, cfg.h, cfg.seed), data, list(cfg.tasks),
                 cfg.train_config()).model
    recs = ex.rss_experiment(cfg, data, base, args.subsets, args.layer, args.epochs, args.lr)
    write_atomic(out / "rss_records.csv", ex.table_csv([{"label": r.label, "rel_dist": r.rel_dist, "rss": r.rss}
                                                        for r in recs]))
    table = lin.bucket_rss(recs)
    write_atomic(out / "rss.csv", ex.table_csv(table))
    print(ex.table_csv(table), end="")


def cmd_prop1(args) -> None:
    cfg = load_config(args)
    out = out_dir(args, cfg)
    if args.linear:
        rng = np.random.default_rng(cfg.seed)
        X = rng.standard_normal((args.rows, args.dim))
        c = rng.standard_normal(args.rows)
        rep = lin.gap_check_linear(X, c, np.full(args.rows, 1.0 / args.rows), min(cfg.d, args.dim), lam=1e-8,
                               seed=cfg.seed)
    else:
        _write_config(out, cfg)
        data = StepCache(ex.build_datasets(cfg))
        meta = train_meta_init(new_chain(list(cfg.tasks), cfg.L, cfg.h, cfg.seed), data, list(cfg.tasks),
                               args.layer, cfg.brane_config().meta_cfg()).model
        rep = ex.gap_check_network(cfg, data, meta, l=args.layer)
    ex.write_json(out / "prop1.json", rep.as_dict())
    print(json.dumps(rep.as_dict(), default=float))


def cmd_sweep(args) -> None:
    cfg = load_config(args)
    out = out_dir(args, cfg)
    _write_config(out, cfg)
    sizes = [int(x) for x in args.sizes.split(",")]
    joint = args.joint.split(",") if args.joint else None
    results = []
    for task in args.task:
        try:
            results.append(ex.sample_complexity_sweep(task, args.target, sizes, cfg, joint))
        except ex.TargetUnreached as exc:
            results.append(exc.result)
    text = ex.sweep_csv(results)
    write_atomic(out / "sweep.csv", text)
    print(text, end="")


def cmd_report(args) -> None:
    rows = ex.report(args.runs)
    text = ex.table_csv(rows)
    if args.out:
        write_atomic(out_dir(args) / "report.csv", text)
    print(text, end="")


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="autobrane", description="Branching multitask networks for graph-algorithm traces.")
    sub = p.add_subparsers(dest="cmd", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen", help="generate datasets")
    g.add_argument("--task", action="append", help="task name (repeatable)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-train", type=int, default=200)
    g.add_argument("--n-val", type=int, default=32)
    g.add_argument("--n-test", type=int, default=32)
    g.add_argument("--nodes-train", type=int, default=8)
    g.add_argument("--nodes-test", type=int, default=16)
    g.add_argument("--p", type=float, default=0.3)
    g.add_argument("--weighted", choices=["yes", "no"])
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train STN, MTN or a saved tree")
    _add_common(t)
    t.add_argument("--mode", choices=["stn", "mtn", "tree"], default="mtn")
    t.add_argument("--tree", help="directory of a saved branching model")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("affinity", help="estimate the layer-conditioned affinity matrix")
    _add_common(a)
    a.add_argument("--layer", type=int, default=1)
    a.set_defaults(func=cmd_affinity)

    c = sub.add_parser("cluster", help="partition tasks from an affinity CSV")
    c.add_argument("--csv", required=True)
    c.add_argument("--raw", action="store_true", help="CSV already holds a symmetric affinity")
    c.add_argument("--lambdas")
    c.add_argument("--L", type=int, default=3)
    c.add_argument("--layer", type=int, default=1)
    c.add_argument("--max-growth", type=float, default=5.0)
    c.add_argument("--out")
    c.set_defaults(func=cmd_cluster)

    b = sub.add_parser("brane", help="search and train a branching network")
    _add_common(b)
    b.set_defaults(func=cmd_brane)

    e = sub.add_parser("eval", help="score a saved model")
    _add_common(e)
    e.add_argument("--model", required=True)
    e.add_argument("--split", default="test", choices=["train", "val", "test"])
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("rss", help="bucketed linearization residuals")
    _add_common(r)
    r.add_argument("--subsets", type=int, default=20)
    r.add_argument("--layer", type=int, default=1)
    r.add_argument("--epochs", type=int, default=6)
    r.add_argument("--lr", type=float, default=1e-3)
    r.set_defaults(func=cmd_rss)

    q = sub.add_parser("prop1", help="surrogate-vs-retraining gap report")
    _add_common(q)
    q.add_argument("--layer", type=int, default=1)
    q.add_argument("--linear", action="store_true", help="use a parameter-linear model")
    q.add_argument("--rows", type=int, default=2000)
    q.add_argument("--dim", type=int, default=100)
    q.set_defaults(func=cmd_prop1)

    s = sub.add_parser("sweep", help="sample-complexity sweep")
    _add_common(s)
    s.add_argument("--task", action="append", required=True)
    s.add_argument("--sizes", default="25,50,100,200,400")
    s.add_argument("--target", type=float, default=0.05)
    s.add_argument("--joint", help="comma-separated tasks trained jointly")
    s.set_defaults(func=cmd_sweep)

    rp = sub.add_parser("report", help="combine summary.csv files")
    rp.add_argument("runs", nargs="+")
    rp.add_argument("--out")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
    except UsageError as exc:
        print(f"error: UsageError: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - every failure becomes one parseable line
        print(f"error: {type(exc).__name__}: {exc}".replace("\n", " "), file=sys.stderr)
        return 2
    return 0


def cli(argv=None) -> int:
    return main(argv)


if __name__ == "__main__":
    sys.exit(main())
