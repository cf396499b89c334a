"""Training objectives: adversarial, L1 and depth-aware reconstruction terms."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Tuple, Union

import numpy as np

from .autodiff import functional as F
from .autodiff.tensor import Tensor, compute_dtype
from .errors import ConfigError, ShapeError
from .imaging import BinaryMask

ADVERSARIAL_MODES = ("nonsaturating", "minimax")


@dataclass
class LossConfig:
    lambda_l1: float = 100.0
    lambda_depth: float = 100.0
    # None defers to the threshold recorded in the dataset manifest
    depth_threshold: Optional[float] = None
    adversarial: str = "nonsaturating"

    def __post_init__(self):
        for name in ("lambda_l1", "lambda_depth"):
            value = getattr(self, name)
            if not (isinstance(value, (int, float)) and math.isfinite(value) and value >= 0):
                raise ConfigError(f"loss.{name} must be a finite non-negative number, got {value!r}")
        if self.depth_threshold is not None and not 0.0 <= self.depth_threshold <= 1.0:
            raise ConfigError(f"loss.depth_threshold must lie in [0, 1], got {self.depth_threshold!r}")
        if self.adversarial not in ADVERSARIAL_MODES:
            raise ConfigError(f"loss.adversarial must be one of {ADVERSARIAL_MODES}, got {self.adversarial!r}")


@dataclass
class LossReport:
    adv_g: float
    adv_d: float
    l1: float
    depth: float
    total_g: float

    def identity_error(self, config: LossConfig) -> float:
        """Relative deviation of ``total_g`` from its composition."""
        expected = self.adv_g + config.lambda_l1 * self.l1 + config.lambda_depth * self.depth
        return abs(self.total_g - expected) / max(abs(expected), 1e-12)

    def as_dict(self) -> dict:
        return asdict(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=compute_dtype()))


def _mask_array(mask, shape) -> np.ndarray:
    """Broadcast a spatial mask over batch and channels of ``shape``."""
    m = mask.values if isinstance(mask, BinaryMask) else np.asarray(mask)
    m = m.astype(compute_dtype())
    n, c, h, w = shape
    if m.ndim == 2:
        m = m[None, None]
    elif m.ndim == 3:
        m = m[:, None]
    if m.ndim != 4 or m.shape[2:] != (h, w) or m.shape[1] not in (1, c) or m.shape[0] not in (1, n):
        raise ShapeError(f"mask of shape {np.shape(mask.values if isinstance(mask, BinaryMask) else mask)} "
                         f"does not match images of shape {shape}")
    return np.ascontiguousarray(np.broadcast_to(m, shape))


def l1_loss(pred: Tensor, target) -> Tensor:
    """Mean absolute error over every pixel-channel entry."""
    target = _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss: shape mismatch {pred.shape} vs {target.shape}")
    return F.mean(F.abs(F.sub(target, pred)))


def depth_aware_loss(pred: Tensor, target, mask) -> Tensor:
    """L1 error kept only where the depth mask is 1, normalized by the full entry count.

    The gradient is exactly zero wherever the mask is 0.
    """
    target = _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"depth_aware_loss: shape mismatch {pred.shape} vs {target.shape}")
    m = _mask_array(mask, pred.shape)
    return F.mean(F.mul(F.abs(F.sub(target, pred)), m))


def discriminator_loss(d_real_logits: Tensor, d_fake_logits: Tensor) -> Tensor:
    return F.add(F.bce_with_logits(d_real_logits, 1.0), F.bce_with_logits(d_fake_logits, 0.0))


def generator_adversarial_loss(d_fake_logits: Tensor, mode: str = "nonsaturating") -> Tensor:
    if mode == "nonsaturating":
        return F.bce_with_logits(d_fake_logits, 1.0)
    if mode == "minimax":
        # literal min log(1 - D(G)) == -BCE(fake, 0)
        return F.neg(F.bce_with_logits(d_fake_logits, 0.0))
    raise ConfigError(f"unknown adversarial mode {mode!r}")


def adversarial_losses(d_real_logits: Tensor, d_fake_logits: Tensor, mode: str = "nonsaturating") -> Tuple[Tensor, Tensor]:
    """(generator adversarial term, discriminator loss)."""
    return generator_adversarial_loss(d_fake_logits, mode), discriminator_loss(d_real_logits, d_fake_logits)


Number = Union[float, Tensor]


def total_generator_objective(g_adv: Number, l1: Number, depth: Number, config: LossConfig) -> Number:
    if isinstance(g_adv, Tensor):
        return F.add(F.add(g_adv, F.mul(l1, config.lambda_l1)), F.mul(depth, config.lambda_depth))
    return g_adv + config.lambda_l1 * l1 + config.lambda_depth * depth
