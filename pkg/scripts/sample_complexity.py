"""Training-set size needed to reach a validation pointer error, per task, plus the shared-chain check."""

import argparse
from dataclasses import replace

from autobrane import experiments as ex


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--tasks", nargs="+", default=["bfs", "dijkstra", "prim"])
    ap.add_argument("--sizes", type=int, nargs="+", default=[25, 50, 100, 200, 400])
    ap.add_argument("--target", type=float, default=0.05)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--joint-size", type=int, default=100)
    args = ap.parse_args()

    for seed in args.seeds:
        cfg = ex.ExperimentConfig(tasks=tuple(args.tasks), seed=seed, data_seed=seed)
        for task in args.tasks:
            r = ex.sample_complexity_sweep(task, args.target, args.sizes, replace(cfg), raise_unreached=False)
            curve = " ".join(f"{s}:{e:.3f}" for s, e in zip(r.sizes, r.val_err))
            print(f"seed {seed} {task:10s} minimal={r.minimal}  {curve}", flush=True)
        for task, v in ex.mt_vs_st(args.tasks, args.joint_size, cfg).items():
            print(f"seed {seed} {task:10s} single {v['st_err']:.3f}  shared {v['mt_err']:.3f}", flush=True)


if __name__ == "__main__":
    main()
