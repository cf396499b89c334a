"""Evaluation metrics on RGB at the 0-255 scale (alpha is excluded)."""

from __future__ import annotations

import csv
import math
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError
from .imaging import BinaryMask, ImageRgba

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
DATA_RANGE = 255.0

METRIC_FIELDS = ("sample_id", "mae", "psnr", "ssim", "masked_mae")


def _rgb255(a: ImageRgba, b: ImageRgba, what: str):
    if (a.width, a.height) != (b.width, b.height):
        raise ShapeError(f"{what}: size mismatch {a.width}x{a.height} vs {b.width}x{b.height}")
    return a.rgb.astype(np.float64) * DATA_RANGE, b.rgb.astype(np.float64) * DATA_RANGE


def mae_metric(a: ImageRgba, b: ImageRgba) -> float:
    x, y = _rgb255(a, b, "mae_metric")
    return float(np.mean(np.abs(x - y)))


def mse_metric(a: ImageRgba, b: ImageRgba) -> float:
    x, y = _rgb255(a, b, "mse_metric")
    return float(np.mean((x - y) ** 2))


def psnr_from_mse(mse: float) -> float:
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(DATA_RANGE ** 2 / mse))


def psnr_metric(a: ImageRgba, b: ImageRgba) -> float:
    """Peak signal-to-noise ratio in dB; identical images report the 100 dB cap."""
    return psnr_from_mse(mse_metric(a, b))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(x: np.ndarray, window: np.ndarray) -> np.ndarray:
    k = window.shape[0]
    return np.einsum("ijkl,kl->ij", sliding_window_view(x, (k, k)), window)


def ssim_map(x: np.ndarray, y: np.ndarray, window: np.ndarray) -> np.ndarray:
    """Local SSIM of two single-channel 0-255 planes over valid window positions."""
    c1 = (SSIM_K1 * DATA_RANGE) ** 2
    c2 = (SSIM_K2 * DATA_RANGE) ** 2
    mu_x = _filter_valid(x, window)
    mu_y = _filter_valid(y, window)
    var_x = _filter_valid(x * x, window) - mu_x * mu_x
    var_y = _filter_valid(y * y, window) - mu_y * mu_y
    cov = _filter_valid(x * y, window) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return num / den


def ssim_metric(a: ImageRgba, b: ImageRgba) -> float:
    """Mean local SSIM over RGB, 11x11 Gaussian window with sigma 1.5."""
    if min(a.width, a.height) < SSIM_WINDOW:
        raise ShapeError(f"ssim_metric needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.width}x{a.height}")
    x, y = _rgb255(a, b, "ssim_metric")
    window = gaussian_window()
    maps = [ssim_map(x[..., ch], y[..., ch], window) for ch in range(3)]
    return float(np.mean(maps))


def masked_region_mae(a: ImageRgba, b: ImageRgba, mask: BinaryMask) -> float:
    """MAE restricted to pixels where the mask is 1; 0 for an empty mask."""
    x, y = _rgb255(a, b, "masked_region_mae")
    if (mask.width, mask.height) != (a.width, a.height):
        raise ShapeError(f"masked_region_mae: mask {mask.width}x{mask.height} vs image {a.width}x{a.height}")
    sel = mask.values.astype(bool)
    if not sel.any():
        return 0.0
    return float(np.mean(np.abs(x[sel] - y[sel])))


def evaluate_pair(sample_id: str, pred: ImageRgba, target: ImageRgba, mask: BinaryMask) -> dict:
    return {
        "sample_id": sample_id,
        "mae": mae_metric(pred, target),
        "psnr": psnr_metric(pred, target),
        "ssim": ssim_metric(pred, target),
        "masked_mae": masked_region_mae(pred, target, mask),
    }


def mean_row(rows: Sequence[dict], label: str = "mean") -> dict:
    out = {"sample_id": label}
    for key in METRIC_FIELDS[1:]:
        out[key] = float(np.mean([r[key] for r in rows])) if rows else float("nan")
    return out


def write_metric_csv(rows: Iterable[dict], path, with_mean: bool = True) -> None:
    rows = list(rows)
    if with_mean:
        rows = rows + [mean_row(rows)]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
