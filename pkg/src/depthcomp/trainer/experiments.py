"""Experiment harnesses: depth-loss ablation, batch-size and learning-rate sweeps."""

from __future__ import annotations

import csv
from dataclasses import replace
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from ..metrics import METRIC_FIELDS, mean_row
from .loop import TrainConfig, evaluate, train

ABLATION_FIELDS = ("mode", "mae", "psnr", "ssim", "masked_mae")
BATCH_FIELDS = ("batch_size", "steps", "mae", "psnr", "ssim", "masked_mae")
LR_FIELDS = ("lr_g", "lr_d", "mae", "collapsed", "trigger_step", "steps_to_plateau")
DEFAULT_BATCH_SIZES = (1, 4, 8, 16, 32)
DEFAULT_LR_GRID = ((2e-4, 1e-4), (1e-4, 1e-4), (2e-4, 2e-4), (3e-4, 3e-4), (4e-4, 4e-4))
PLATEAU_WINDOW = 50
PLATEAU_TOLERANCE = 0.01


def _summary(networks, samples, threshold, workers) -> dict:
    row = mean_row(evaluate(networks, samples, threshold, workers))
    return {k: row[k] for k in METRIC_FIELDS[1:]}


def ablation_run(config: TrainConfig, train_samples, eval_samples, threshold: float, workers: int = 1) -> List[dict]:
    """Train without and with the depth-aware term from the same seed; mean held-out metrics per arm."""
    if not eval_samples:
        raise ValueError("ablation needs held-out samples")
    rows = []
    for mode, lam in (("without_dal", 0.0), ("with_dal", config.loss.lambda_depth)):
        arm = replace(config, loss=replace(config.loss, lambda_depth=lam))
        result = train(arm, train_samples, threshold)
        rows.append({"mode": mode, **_summary(result.networks, eval_samples, threshold, workers)})
    return rows


def sweep_batch_size(config: TrainConfig, train_samples, eval_samples, threshold: float,
                     sizes: Sequence[int] = DEFAULT_BATCH_SIZES, steps: Optional[int] = None,
                     workers: int = 1) -> List[dict]:
    """One run per batch size under a fixed optimizer-step budget."""
    budget = steps or config.total_steps(len(train_samples))
    rows = []
    for size in sizes:
        epochs = -(-budget * size // len(train_samples))
        run = replace(config, batch_size=int(size), epochs=max(epochs, 1), max_steps=budget)
        result = train(run, train_samples, threshold)
        rows.append({"batch_size": int(size), "steps": result.step,
                     **_summary(result.networks, eval_samples, threshold, workers)})
    return rows


def steps_to_plateau(total_g: Sequence[float], window: int = PLATEAU_WINDOW, tolerance: float = PLATEAU_TOLERANCE) -> Optional[int]:
    """First step whose trailing moving average moved by less than ``tolerance`` (relative) over ``window`` steps."""
    x = np.asarray(total_g, dtype=np.float64)
    if len(x) < 2 * window:
        return None
    csum = np.concatenate([[0.0], np.cumsum(x)])
    ma = (csum[window:] - csum[:-window]) / window  # ma[k] averages steps k+1 .. k+window
    for k in range(window, len(ma)):
        prev = ma[k - window]
        if abs(ma[k] - prev) < tolerance * abs(prev):
            return k + window
    return None


def sweep_learning_rates(config: TrainConfig, train_samples, eval_samples, threshold: float,
                         grid: Iterable[Tuple[float, float]] = DEFAULT_LR_GRID, generator_mode: str = "trained",
                         workers: int = 1) -> List[dict]:
    """Per (lr_g, lr_d) pair: held-out MAE, collapse flag and steps to plateau."""
    rows = []
    for lr_g, lr_d in grid:
        run = replace(config, lr_g=float(lr_g), lr_d=float(lr_d))
        result = train(run, train_samples, threshold, generator_mode=generator_mode)
        summary = _summary(result.networks, eval_samples, threshold, workers)
        if generator_mode == "constant":
            summary = {"mae": float("nan")}
        rows.append({
            "lr_g": float(lr_g), "lr_d": float(lr_d), "mae": summary["mae"],
            "collapsed": "yes" if result.collapse.collapsed else "no",
            "trigger_step": result.collapse.trigger_step,
            "steps_to_plateau": steps_to_plateau(result.history.column("total_g")),
        })
    return rows


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6g}" if value and (abs(value) < 1e-3) else f"{value:.6f}"
    return str(value)


def write_table_csv(rows: Sequence[dict], fields: Sequence[str], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(fields)
        for row in rows:
            writer.writerow([_fmt(row.get(f)) for f in fields])
