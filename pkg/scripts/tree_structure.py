"""How many layers each task pair shares in searched trees, over seeds."""

import argparse
import itertools
from dataclasses import replace
from pathlib import Path

from autobrane import brane as br
from autobrane import experiments as ex
from autobrane.trainer import StepCache


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("config", nargs="?", default="configs/toy_tree.txt")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    args = ap.parse_args()

    base = ex.ExperimentConfig.from_text(Path(args.config).read_text())
    for seed in args.seeds:
        cfg = replace(base, seed=seed, data_seed=seed)
        data = StepCache(ex.build_datasets(cfg))
        model, state = br.autobrane(data, list(cfg.tasks), cfg.brane_config())
        shared = {f"{a}-{b}": br.shared_layers(model, a, b) for a, b in itertools.combinations(cfg.tasks, 2)}
        parts = [e["groups"] for e in state.events if e["event"] == "partition"]
        print(seed, shared, parts, flush=True)


if __name__ == "__main__":
    main()
