"""Bucketed linearization residuals of fine-tuning trajectories around a trained chain."""

import argparse
from pathlib import Path

import numpy as np

from autobrane import experiments as ex
from autobrane import linearizer as lin
from autobrane.branchnet import new_chain
from autobrane.tracegen import write_atomic
from autobrane.trainer import StepCache, train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("config")
    ap.add_argument("--subsets", type=int, default=20)
    ap.add_argument("--layer", type=int, default=1)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--base-epochs", type=int, default=15)
    ap.add_argument("--out", default="runs/rss")
    args = ap.parse_args()

    cfg = ex.ExperimentConfig.from_text(Path(args.config).read_text())
    cfg.epochs = args.base_epochs
    data = StepCache(ex.build_datasets(cfg))
    base = train(new_chain(list(cfg.tasks), cfg.L, cfg.h, cfg.seed), data, list(cfg.tasks), cfg.train_config()).model
    recs = ex.rss_experiment(cfg, data, base, args.subsets, args.layer, args.epochs, args.lr)
    table = lin.bucket_rss(recs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_atomic(out / "rss.csv", ex.table_csv(table))
    for row in table:
        print(f"({row['lo']:.2f}, {row['hi']:.2f}]  n={row['count']:3d}  mean={row['mean']:.2e}  std={row['std']:.2e}")
    near = [r.rss for r in recs if r.rel_dist <= 0.10]
    print(f"mean RSS at relative distance <= 10%: {np.mean(near):.3e}")


if __name__ == "__main__":
    main()
