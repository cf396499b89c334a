"""Depth-aware image compositing: autodiff core, networks, training and evaluation."""

from .datagen import DatasetManifest, Sample, SceneSpec, generate_samples, generate_scene, load_dataset, write_dataset
from .estimator import DepthAwareCompositor
from .imaging import AffineParams, BinaryMask, DepthMap, ImageRgba, alpha_over, classical_composite, threshold_depth
from .losses import LossConfig, LossReport
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "AffineParams",
    "BinaryMask",
    "DatasetManifest",
    "DepthAwareCompositor",
    "DepthMap",
    "ImageRgba",
    "LossConfig",
    "LossReport",
    "Sample",
    "SceneSpec",
    "TrainConfig",
    "alpha_over",
    "classical_composite",
    "generate_samples",
    "generate_scene",
    "load_dataset",
    "threshold_depth",
    "train",
    "write_dataset",
]
