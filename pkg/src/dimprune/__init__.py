"""Dimension search and structured pruning for windowed-attention backbones.

The package trains per-site diagonal scores on attention and MLP width
dimensions, prunes low-scoring dimensions with exact weight folding, and
accounts for the parameter/FLOP effect with a closed-form cost model that is
cross-checked against instrumented forward passes.
"""

from .blocks import Backbone, BackboneConfig, build_backbone, forward_batch
from .checkpoint import (
    Checkpoint,
    checkpoint_from_model,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
)
from .costmodel import (
    Convention,
    calibrate_mac_factor,
    measured_cost,
    model_cost,
    swin_t_config,
)
from .data import Dataset, load_cifar, synth_dataset
from .errors import (
    ConfigError,
    DimensionError,
    DimPruneError,
    FormatError,
    NumericError,
    UsageError,
)
from .pipeline import (
    AdamW,
    TrainSettings,
    evaluate,
    run_finetune,
    run_prune,
    run_search,
)
from .pruner import KeepSet, PruneReport, masked_scores, prune_model
from .scoring import ScoredModel, attach_scores, score_summary, total_loss
from .tensor import Tape, Tensor, backward

__version__ = "0.1.0"

__all__ = [
    "AdamW",
    "Backbone",
    "BackboneConfig",
    "Checkpoint",
    "ConfigError",
    "Convention",
    "Dataset",
    "DimensionError",
    "DimPruneError",
    "FormatError",
    "KeepSet",
    "NumericError",
    "PruneReport",
    "ScoredModel",
    "Tape",
    "Tensor",
    "TrainSettings",
    "UsageError",
    "attach_scores",
    "backward",
    "build_backbone",
    "calibrate_mac_factor",
    "checkpoint_from_model",
    "evaluate",
    "forward_batch",
    "load_checkpoint",
    "load_cifar",
    "masked_scores",
    "measured_cost",
    "model_cost",
    "model_from_checkpoint",
    "prune_model",
    "run_finetune",
    "run_prune",
    "run_search",
    "save_checkpoint",
    "score_summary",
    "swin_t_config",
    "synth_dataset",
    "total_loss",
    "__version__",
]
