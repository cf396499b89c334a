"""Optimize composite pixels directly against the reconstruction losses."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List

import numpy as np

from ..autodiff.tensor import Tensor, backward
from ..errors import ShapeError, TrainingAborted
from ..imaging import BinaryMask, ImageRgba, array_to_images, images_to_array
from ..losses import LossConfig, depth_aware_loss, l1_loss
from ..metrics import masked_region_mae
from .optim import Adam

PIXEL_LR = 0.05
PIXEL_BETAS = (0.9, 0.999)
# per-step learning-rate decay; sign-like L1 gradients otherwise keep Adam oscillating at amplitude ~lr
PIXEL_DECAY = 0.985


@dataclass
class PixelOptResult:
    image: ImageRgba
    masked_mae: List[float]  # entry 0 is the starting value, entry k follows step k
    loss: List[float]


def direct_pixel_optimize(initial: ImageRgba, target: ImageRgba, mask: BinaryMask, config: LossConfig,
                          steps: int = 500, lr: float = PIXEL_LR, betas=PIXEL_BETAS,
                          decay: float = PIXEL_DECAY) -> PixelOptResult:
    """Adam on the pixels of ``initial`` minimizing lambda_l1 * L1 + lambda_depth * DAL.

    The step size shrinks geometrically by ``decay`` each step.
    """
    if (initial.width, initial.height) != (target.width, target.height) or (mask.width, mask.height) != (target.width, target.height):
        raise ShapeError("initial, target and mask must share dimensions")
    pixels = Tensor(images_to_array([initial]), requires_grad=True)
    goal = images_to_array([target])
    opt = Adam([("pixels", pixels)], lr, betas)
    curve = [masked_region_mae(initial, target, mask)]
    losses = []
    for step in range(steps):
        opt.zero_grad()
        loss = l1_loss(pixels, goal) * config.lambda_l1 + depth_aware_loss(pixels, goal, mask) * config.lambda_depth
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingAborted(f"pixel objective became non-finite at step {step}", step - 1 if step else None)
        losses.append(value)
        backward(loss)
        opt.lr = lr * decay ** step
        opt.step(step)
        # keep pixels in the representable range
        pixels.data = np.clip(pixels.data, -1.0, 1.0)
        curve.append(masked_region_mae(array_to_images(pixels.data)[0], target, mask))
    return PixelOptResult(array_to_images(pixels.data)[0], curve, losses)


def window_means(curve, window: int = 50) -> List[float]:
    curve = np.asarray(curve, dtype=np.float64)
    return [float(curve[i:i + window].mean()) for i in range(0, len(curve) - window + 1, window)]


# float32 noise floor on the 0-255 scale; far below one 8-bit code
TREND_SLACK = 1e-4


def monotone_trend(curve, window: int = 50, slack: float = TREND_SLACK) -> bool:
    """True when consecutive window means never rise by more than ``slack``."""
    means = window_means(curve, window)
    return all(b <= a + slack for a, b in zip(means, means[1:]))
