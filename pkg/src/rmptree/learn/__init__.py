"""Learning: reverse-mode differentiation through the fusion forward pass,
behavior cloning, and the unstructured baseline."""

from .data import Dataset, concat_datasets
from .policies import BoundPolicy, TreePolicy, UnstructuredPolicy, unstructured_policy
from .tape import Tape, Tensor
from .training import (
    GRAD_CLIP_NORM,
    OptState,
    TrainConfig,
    TrainResult,
    grad_params,
    init_opt,
    loss_mse,
    optimizer_step,
    train_bc,
)

__all__ = [
    "Dataset",
    "concat_datasets",
    "BoundPolicy",
    "TreePolicy",
    "UnstructuredPolicy",
    "unstructured_policy",
    "Tape",
    "Tensor",
    "GRAD_CLIP_NORM",
    "OptState",
    "TrainConfig",
    "TrainResult",
    "grad_params",
    "init_opt",
    "loss_mse",
    "optimizer_step",
    "train_bc",
]
