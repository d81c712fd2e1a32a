"""STN, MTN and the searched tree on one config over several seeds.

    python scripts/compare_methods.py configs/desk_suite.txt --seeds 0 1 2 --out runs/suite
"""

import argparse
from dataclasses import replace
from pathlib import Path

from autobrane import experiments as ex
from autobrane.branchnet import to_dot
from autobrane.tracegen import write_atomic
from autobrane.trainer import StepCache


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("config")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", default="runs/compare")
    ap.add_argument("--skip-stn", action="store_true")
    args = ap.parse_args()

    base = ex.ExperimentConfig.from_text(Path(args.config).read_text())
    rows = []
    for seed in args.seeds:
        cfg = replace(base, seed=seed, data_seed=seed)
        cfg.validate()
        out = Path(args.out) / f"seed{seed}"
        out.mkdir(parents=True, exist_ok=True)
        write_atomic(out / "config.txt", cfg.to_text())
        data = StepCache(ex.build_datasets(cfg))
        results = [] if args.skip_stn else [ex.run_stn(cfg, data)]
        results.append(ex.run_mtn(cfg, data))
        res, _ = ex.run_brane(cfg, data, out / "brane")
        write_atomic(out / "tree.dot", to_dot(res.models["brane"]))
        results.append(res)
        for r in results:
            rows.append({"seed": seed, **r.row()})
            print(seed, r.method, f"{r.mean_score:.4f}", r.module_count, flush=True)
    write_atomic(Path(args.out) / "summary.csv", ex.table_csv(rows))


if __name__ == "__main__":
    main()
