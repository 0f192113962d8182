"""Disentangled graph contrastive learning for review-based rating prediction."""

__version__ = "0.1.0"

from .autodiff import Parameter, ParameterStore, Tensor, adam_step
from .datasets import (
    InteractionDataset,
    RatingGraph,
    ReviewWhitener,
    build_graph,
    load_interactions,
    make_synthetic_dataset,
    split_dataset,
    whiten_vectors,
)
from .estimator import DGCLRRegressor
from .evaluation import evaluate_mse, explain_prediction, runtime_bench, sparsity_report
from .model import DGCLRNet, VARIANTS
from .training import TrainConfig, fit, load_checkpoint, load_model, save_checkpoint

__all__ = [
    "DGCLRNet",
    "DGCLRRegressor",
    "InteractionDataset",
    "Parameter",
    "ParameterStore",
    "RatingGraph",
    "ReviewWhitener",
    "Tensor",
    "TrainConfig",
    "VARIANTS",
    "adam_step",
    "build_graph",
    "evaluate_mse",
    "explain_prediction",
    "fit",
    "load_checkpoint",
    "load_interactions",
    "load_model",
    "make_synthetic_dataset",
    "runtime_bench",
    "save_checkpoint",
    "sparsity_report",
    "split_dataset",
    "whiten_vectors",
    "__version__",
]
