"""Annotator-specific emotion models and enrollment-based head mapping."""

__version__ = "0.1.0"

from .corpus import ALL, DIMENSIONS, Dataset, load_dataset, preprocess, write_dataset
from .crowd_sim import SimConfig, simulate
from .errors import AnnomapError
from .mapper import METHODS, MappingTable, map_random, map_similar
from .metrics import ccc, entropy_log2, paired_t_test, pcc
from .network import ModelConfig, ModelParams, forward, init_model
from .training import TrainConfig, train_aggregate, train_individual

__all__ = [
    "ALL", "DIMENSIONS", "METHODS",
    "AnnomapError", "Dataset", "MappingTable", "ModelConfig", "ModelParams", "SimConfig", "TrainConfig",
    "ccc", "entropy_log2", "forward", "init_model", "load_dataset", "map_random", "map_similar",
    "paired_t_test", "pcc", "preprocess", "simulate", "train_aggregate", "train_individual", "write_dataset",
]  # fmt: skip
