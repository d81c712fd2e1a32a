"""Branching multitask networks for learning graph-algorithm execution traces."""

from .branchnet import BranchingModel, StepData, make_steps, new_chain, split_node
from .brane import BraneConfig, autobrane, fast_approx_partition
from .clusterer import select_partition, solve_sdp
from .tracegen import ALGORITHMS, DatasetConfig, execute, gen_er_graph, make_dataset
from .trainer import TrainConfig, evaluate, train

__all__ = [
    "ALGORITHMS", "BraneConfig", "BranchingModel", "DatasetConfig", "StepData", "TrainConfig", "autobrane",
    "evaluate", "execute", "fast_approx_partition", "gen_er_graph", "make_dataset", "make_steps", "new_chain",
    "select_partition", "solve_sdp", "split_node", "train",
]
