"""Mode-collapse telemetry: discriminator accuracy and output diversity."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Optional

import numpy as np

DEFAULT_WINDOW = 200
ACCURACY_THRESHOLD = 0.95
DIVERSITY_THRESHOLD = 1.0
DIVERSITY_BUFFER = 16


@dataclass
class CollapseReport:
    collapsed: bool
    trigger_step: Optional[int]
    d_accuracy_window: float
    sample_diversity: float

    def as_dict(self) -> dict:
        return {"collapsed": self.collapsed, "trigger_step": self.trigger_step,
                "d_accuracy_window": self.d_accuracy_window, "sample_diversity": self.sample_diversity}


def to_rgb255(output: np.ndarray) -> np.ndarray:
    """(4, H, W) network output in [-1, 1] to RGB on the 0-255 scale."""
    return np.clip((output[:3].astype(np.float64) + 1.0) * 127.5, 0.0, 255.0)


class DiversityTracker:
    """Mean pairwise MAE over the most recent generator outputs."""

    def __init__(self, size: int = DIVERSITY_BUFFER):
        self.size = size
        self.items: deque = deque(maxlen=size)
        self.raw: deque = deque(maxlen=size)  # untouched outputs, kept for checkpoints
        self.dist: deque = deque(maxlen=size)  # row i: distances from item i to the items before it

    def add(self, output: np.ndarray) -> None:
        rgb = to_rgb255(output)
        row = [float(np.mean(np.abs(rgb - other))) for other in self.items]
        if len(self.items) == self.size:
            # the oldest item leaves; drop its distances from every later row
            self.dist.popleft()
            self.dist = deque((r[1:] for r in self.dist), maxlen=self.size)
            row = row[1:]
        self.items.append(rgb)
        self.raw.append(np.array(output, dtype=np.float32))
        self.dist.append(row)

    def diversity(self) -> float:
        pairs = [d for r in self.dist for d in r]
        return float(np.mean(pairs)) if pairs else float("nan")


def detect_mode_collapse(history, window: int = DEFAULT_WINDOW, accuracy_threshold: float = ACCURACY_THRESHOLD,
                         diversity_threshold: float = DIVERSITY_THRESHOLD) -> CollapseReport:
    """Flag the first step where windowed D accuracy and recent diversity both indicate collapse."""
    acc = history.column("d_accuracy")
    div = history.column("diversity")
    n = len(acc)
    if n < window:
        return CollapseReport(False, None, float(acc.mean()) if n else float("nan"),
                              float(div[-1]) if n else float("nan"))
    csum = np.concatenate([[0.0], np.cumsum(acc)])
    rolling = (csum[window:] - csum[:-window]) / window  # rolling[k] covers rows k .. k+window-1
    for k, mean_acc in enumerate(rolling):
        t = k + window - 1
        if mean_acc > accuracy_threshold and div[t] < diversity_threshold:
            return CollapseReport(True, int(history.rows[t]["step"]), float(mean_acc), float(div[t]))
    return CollapseReport(False, None, float(rolling[-1]), float(div[-1]))
