"""Input checks shared by the estimator and the CLI."""

from __future__ import annotations

from typing import List

from .datagen import Sample
from .errors import DatasetError, ShapeError


def check_samples(X, image_size: int = None) -> List[Sample]:
    """Return ``X`` as a list of samples, rejecting empty input or mixed sizes."""
    if isinstance(X, Sample):
        X = [X]
    samples = list(X)
    if not samples:
        raise DatasetError("expected at least one sample")
    bad = [type(s).__name__ for s in samples if not isinstance(s, Sample)]
    if bad:
        raise TypeError(f"expected Sample records, got {bad[0]}")
    sizes = {(s.background.width, s.background.height) for s in samples}
    if len(sizes) != 1:
        raise ShapeError(f"samples disagree in size: {sorted(sizes)}")
    (w, h), = sizes
    if image_size is not None and (w, h) != (image_size, image_size):
        raise ShapeError(f"samples are {w}x{h}, the networks expect {image_size}x{image_size}")
    return samples


def check_threshold(threshold) -> float:
    t = float(threshold)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    return t
