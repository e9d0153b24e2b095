"""Checkpoint merging guided by located, activated parameters.

Modules: :mod:`store` (checkpoints, partitions), :mod:`delta` (deltas, masks),
:mod:`importance` (causal and gradient importance), :mod:`calibration`
(drop ratios, merge weights), :mod:`merge` (merging and recipes),
:mod:`toylab` (toy MLP and synthetic tasks), :mod:`bench` and :mod:`cli`.
"""

from .calibration import CalibrationConfig, linear_rank_drop_ratios, merge_weights, tanh_drop_ratios
from .delta import DropMask, apply_mask, apply_mask_rescale, compute_delta, make_mask, reconstruct
from .errors import AlignmentError, CheckpointFormatError, SchemaError, StageError
from .importance import (
    Evaluator,
    FewShotBatch,
    ImportanceEntry,
    ImportanceReport,
    causal_importance,
    gradient_importance,
    taylor_gap,
)
from .merge import MergeRecipe, merge, run_recipe, task_arithmetic
from .store import (
    Partition,
    PartitionSchema,
    TensorMap,
    build_partitions,
    load_checkpoint,
    save_checkpoint,
    substitute,
)

__version__ = "0.1.0"
