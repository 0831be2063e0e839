"""Node-specific layer aggregation and filtration for deep GNNs, on a small numpy autodiff engine."""

__version__ = "0.1.0"

from .autodiff import SparseCsr, Tape, Tensor  # noqa: E402
from .graph import (Graph, SbmSpec, SplitMasks, generate_sbm, graph_homophily,  # noqa: E402
                    load_bundle, make_split, normalize_adjacency, save_bundle, smoothness_davg)
from .model import ModelConfig, ModelParams, forward, init_params  # noqa: E402
from .train import TrainConfig, run_experiment, train_once  # noqa: E402

__all__ = [
    "SparseCsr", "Tape", "Tensor", "Graph", "SbmSpec", "SplitMasks", "generate_sbm",
    "graph_homophily", "load_bundle", "make_split", "normalize_adjacency", "save_bundle",
    "smoothness_davg", "ModelConfig", "ModelParams", "forward", "init_params", "TrainConfig",
    "run_experiment", "train_once",
]
