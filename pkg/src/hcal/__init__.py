"""Post-hoc classifier recalibration toolkit.

Accuracy-preserving monotonic calibration maps, a sorted-window alignment
training objective with proper-scoring-rule baselines, a full calibration
metric suite, and a CLI for training, evaluating, and reporting.
"""

from .dataset import (
    LogitDataset,
    check_prob_matrix,
    load_dataset,
    save_dataset,
    softmax_rows,
    split_dataset,
)
from .loss import (
    HCalConfig,
    LossOutput,
    brier_loss,
    build_windows,
    hcal_loss,
    kmeans_1d,
    kmeans_weights,
    nll_loss,
    window_sums,
)
from .maps import (
    CalibrationMap,
    EnsembleTempMap,
    ForwardTrace,
    MonotonicNetMap,
    PiecewiseLinearMap,
    init_map,
    load_map,
    save_map,
)
from .metrics import BinStats, MetricReport, evaluate, get_metric, reliability_data
from .optim import (
    AdamState,
    TrainConfig,
    TrainHistory,
    TrainingDivergedError,
    adam_step,
    standard_grid,
    select_model,
    train_one,
)
from .synthetic import make_calibrated_task, make_overconfident_task

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "BinStats",
    "CalibrationMap",
    "EnsembleTempMap",
    "ForwardTrace",
    "HCalConfig",
    "LogitDataset",
    "LossOutput",
    "MetricReport",
    "MonotonicNetMap",
    "PiecewiseLinearMap",
    "TrainConfig",
    "TrainHistory",
    "TrainingDivergedError",
    "adam_step",
    "brier_loss",
    "build_windows",
    "check_prob_matrix",
    "evaluate",
    "get_metric",
    "hcal_loss",
    "init_map",
    "kmeans_1d",
    "kmeans_weights",
    "load_dataset",
    "load_map",
    "make_calibrated_task",
    "make_overconfident_task",
    "nll_loss",
    "standard_grid",
    "reliability_data",
    "save_dataset",
    "save_map",
    "select_model",
    "softmax_rows",
    "split_dataset",
    "train_one",
    "window_sums",
]
