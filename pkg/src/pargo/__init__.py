"""Partial-global token projector: fixed-budget compression of visual
feature sequences via windowed partial tokens plus global tokens, with a
widening self-attention cascade over the partial tokens.

The package is numpy-based and fully deterministic per (config, seed):
a small reverse-mode tensor core, mask builders, the projector stack,
reference and block attention kernels, a synthetic grid-task training
harness, scikit-learn estimator facades, and a CLI (`pargo`).
"""

from .errors import (
    CheckpointError,
    ConfigError,
    MaskError,
    PargoError,
    ShapeError,
    TrainingDivergedError,
)
from .estimators import GridTaskClassifier, ParGoTokenProjector
from .gradcheck import GradCheckReport, grad_check, projector_gradcheck
from .kernels import (
    BenchConfig,
    KernelReport,
    bench,
    block_partial_xattn,
    dense_masked_xattn,
    flops_projection,
    flops_scoreav_block,
    flops_scoreav_dense,
    partial_scoreav_ratio,
)
from .masks import (
    AttentionMask,
    CascadeSpec,
    PartitionSpec,
    build_cpp_mask,
    build_pg_mask,
    export_mask,
    parse_mask,
    saturated_cpp_mask,
)
from .optim import AdamConfig, AdamState, adam_init, adam_step, grad_norm, zero_grads
from .pipeline import (
    GridSample,
    ReadoutParams,
    RunResult,
    StubEncoder,
    TrainConfig,
    ablate,
    ablation_csv,
    default_train_config,
    encode,
    evaluate,
    gen_dataset,
    load_pipeline,
    mean_accuracy_by_variant,
    save_pipeline,
    split_dataset,
    train,
    train_run,
)
from .projector import (
    LayerParams,
    NormParams,
    ParGoConfig,
    ProjectorParams,
    build_masks,
    cpp_block,
    empty_projector,
    forward,
    init_projector,
    load_projector,
    pgp_block,
    save_projector,
)
from .rng import Rng
from .tensor import AttentionWeights, Tensor, backward, no_tape, parameter

__version__ = "0.1.0"

__all__ = [
    "AdamConfig",
    "AdamState",
    "AttentionMask",
    "AttentionWeights",
    "BenchConfig",
    "CascadeSpec",
    "CheckpointError",
    "ConfigError",
    "GradCheckReport",
    "GridSample",
    "GridTaskClassifier",
    "KernelReport",
    "LayerParams",
    "MaskError",
    "NormParams",
    "ParGoConfig",
    "ParGoTokenProjector",
    "PargoError",
    "PartitionSpec",
    "ProjectorParams",
    "ReadoutParams",
    "Rng",
    "RunResult",
    "ShapeError",
    "StubEncoder",
    "Tensor",
    "TrainConfig",
    "TrainingDivergedError",
    "ablate",
    "ablation_csv",
    "adam_init",
    "adam_step",
    "backward",
    "bench",
    "block_partial_xattn",
    "build_cpp_mask",
    "build_masks",
    "build_pg_mask",
    "cpp_block",
    "default_train_config",
    "dense_masked_xattn",
    "empty_projector",
    "encode",
    "evaluate",
    "export_mask",
    "flops_projection",
    "flops_scoreav_block",
    "flops_scoreav_dense",
    "forward",
    "gen_dataset",
    "grad_check",
    "grad_norm",
    "init_projector",
    "load_pipeline",
    "load_projector",
    "mean_accuracy_by_variant",
    "no_tape",
    "parameter",
    "parse_mask",
    "partial_scoreav_ratio",
    "pgp_block",
    "projector_gradcheck",
    "save_pipeline",
    "save_projector",
    "saturated_cpp_mask",
    "split_dataset",
    "train",
    "train_run",
    "zero_grads",
]
