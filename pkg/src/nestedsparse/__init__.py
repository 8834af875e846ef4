"""Nested block-sparse training, storage and inference for toy conv nets."""

from .estimator import NestedBlockPruner, NestedSparseClassifier
from .exceptions import (
    BlockShapeError,
    ConfigError,
    DimensionError,
    DivergenceError,
    FormatError,
    InvariantError,
    LevelError,
    NestedSparseError,
    NestingError,
    StaleCacheError,
)
from .kernels import KernelConfig, dense_matmul, mac_count, quantize_layer, spmm, spmm_q
from .nestedcsr import NestedCSRMatrix, decode, deserialize, encode, footprint, serialize
from .netcore import LayerSpec, OptimizerConfig, ToyNetwork, backward, forward, sgd_step
from .pruning import BlockMask, NestedMaskSet, SparsityLevelSet, apply_mask, get_mask, get_nested_masks
from .training import Mode, PruneSchedule, TrainConfig, evaluate, train, train_step

__version__ = "0.1.0"

__all__ = [
    "BlockMask", "BlockShapeError", "ConfigError", "DimensionError", "DivergenceError",
    "FormatError", "InvariantError", "KernelConfig", "LayerSpec", "LevelError", "Mode",
    "NestedBlockPruner", "NestedCSRMatrix", "NestedMaskSet", "NestedSparseClassifier",
    "NestedSparseError", "NestingError", "OptimizerConfig", "PruneSchedule", "SparsityLevelSet",
    "StaleCacheError", "ToyNetwork", "TrainConfig", "apply_mask", "backward", "decode",
    "dense_matmul", "deserialize", "encode", "evaluate", "footprint", "forward", "get_mask",
    "get_nested_masks", "mac_count", "quantize_layer", "serialize", "sgd_step", "spmm",
    "spmm_q", "train", "train_step",
]
