"""Estimated subset losses against fine-tuned ones, for a sweep of surrogate ridge strengths."""

import argparse
from dataclasses import replace
from pathlib import Path

from autobrane import experiments as ex
from autobrane.branchnet import new_chain
from autobrane.tracegen import write_atomic
from autobrane.trainer import StepCache, TrainConfig, train_meta_init


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("config")
    ap.add_argument("--meta-epochs", type=int, default=15)
    ap.add_argument("--oracle-epochs", type=int, default=10)
    ap.add_argument("--oracle-lr", type=float, default=1e-3)
    ap.add_argument("--lam2", type=float, nargs="+", default=[1e-2])
    ap.add_argument("--out", default="runs/oracle")
    args = ap.parse_args()

    cfg = ex.ExperimentConfig.from_text(Path(args.config).read_text())
    data = StepCache(ex.build_datasets(cfg))
    meta = train_meta_init(new_chain(list(cfg.tasks), cfg.L, cfg.h, cfg.seed), data, list(cfg.tasks), 1,
                           TrainConfig(epochs=args.meta_epochs, lr=cfg.lr)).model
    rows = []
    for lam in args.lam2:
        comp, _ = ex.affinity_oracle(replace(cfg, lam2=lam), data, meta, 1, args.oracle_epochs, args.oracle_lr)
        rows.append({"lam2": lam, "median_rel_err": comp.median_rel_err, "spearman": comp.spearman})
        print(f"lam2={lam:g}  median rel err {comp.median_rel_err:.3f}  spearman {comp.spearman:.3f}", flush=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_atomic(out / "oracle.csv", ex.table_csv(rows))


if __name__ == "__main__":
    main()
