"""Training loop, optimizer, checkpoints and experiment harnesses."""

from .checkpoint import Checkpoint, load_checkpoint, networks_checkpoint, restore_networks, save_checkpoint
from .collapse import CollapseReport, detect_mode_collapse
from .experiments import ablation_run, steps_to_plateau, sweep_batch_size, sweep_learning_rates, write_table_csv
from .loop import RunHistory, TrainConfig, TrainResult, evaluate, predict, train
from .optim import Adam, AdamState, adam_step
from .pixelopt import PixelOptResult, direct_pixel_optimize, monotone_trend

__all__ = [
    "Adam",
    "AdamState",
    "Checkpoint",
    "CollapseReport",
    "PixelOptResult",
    "RunHistory",
    "TrainConfig",
    "TrainResult",
    "ablation_run",
    "adam_step",
    "detect_mode_collapse",
    "direct_pixel_optimize",
    "evaluate",
    "load_checkpoint",
    "monotone_trend",
    "networks_checkpoint",
    "predict",
    "restore_networks",
    "save_checkpoint",
    "steps_to_plateau",
    "sweep_batch_size",
    "sweep_learning_rates",
    "train",
    "write_table_csv",
]
