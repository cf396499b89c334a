"""Adversarial training loop, prediction and evaluation."""

from __future__ import annotations

import csv
import logging
import math
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from ..autodiff.tensor import DTYPE, Tensor, backward, no_grad
from ..errors import ConfigError, DatasetError, TrainingAborted
from ..imaging import ImageRgba, array_to_images, depths_to_array, images_to_array, masks_to_array, threshold_depth
from ..losses import LossConfig, LossReport, depth_aware_loss, discriminator_loss, generator_adversarial_loss, l1_loss, total_generator_objective
from ..metrics import evaluate_pair
from ..networks import (
    DiscriminatorConfig,
    GeneratorConfig,
    InitSpec,
    Networks,
    StnConfig,
    _seed_for,
    build_networks,
)
from .checkpoint import Checkpoint, config_hash, restore_networks
from .collapse import CollapseReport, DiversityTracker, detect_mode_collapse
from .optim import Adam

logger = logging.getLogger(__name__)

CURVE_FIELDS = ("step", "epoch", "adv_g", "adv_d", "l1", "depth", "total_g", "d_accuracy", "diversity")


@dataclass
class TrainConfig:
    epochs: int = 1
    batch_size: int = 1
    # optional cap on optimizer steps, applied after epochs
    max_steps: Optional[int] = None
    lr_g: float = 2e-4
    lr_d: float = 1e-4
    # the placement head sees a weak gradient through the generator; its step is lr_g times this factor
    stn_lr_scale: float = 1.0
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    seed: int = 0
    checkpoint_every: int = 0
    collapse_window: int = 200
    loss: LossConfig = field(default_factory=LossConfig)
    init: InitSpec = field(default_factory=InitSpec)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    stn: StnConfig = field(default_factory=StnConfig)

    def __post_init__(self):
        for name in ("lr_g", "lr_d"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ConfigError(f"train.{name} must be a positive number, got {v!r}")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"train.{name} must lie in [0, 1), got {getattr(self, name)!r}")
        if self.batch_size < 1:
            raise ConfigError(f"train.batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"train.epochs must be >= 1, got {self.epochs}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError(f"train.max_steps must be >= 1, got {self.max_steps}")
        if self.checkpoint_every < 0:
            raise ConfigError(f"train.checkpoint_every must be >= 0, got {self.checkpoint_every}")
        if self.collapse_window < 1:
            raise ConfigError(f"train.collapse_window must be >= 1, got {self.collapse_window}")

    def architecture_hash(self) -> bytes:
        return config_hash({"generator": asdict(self.generator), "discriminator": asdict(self.discriminator),
                            "stn": asdict(self.stn)})

    def total_steps(self, num_samples: int) -> int:
        steps = self.epochs * steps_per_epoch(num_samples, self.batch_size)
        return min(steps, self.max_steps) if self.max_steps else steps


def steps_per_epoch(num_samples: int, batch_size: int) -> int:
    return -(-num_samples // batch_size)


@dataclass
class TrainingData:
    """Network-ready arrays for a list of samples (images in [-1, 1], mask in {0, 1})."""

    ids: List[str]
    fg: np.ndarray
    bg: np.ndarray
    depth: np.ndarray
    gt: np.ndarray
    mask: np.ndarray

    @classmethod
    def from_samples(cls, samples, threshold: float) -> "TrainingData":
        if not samples:
            raise DatasetError("training needs at least one sample")
        return cls(
            [s.id for s in samples],
            images_to_array([s.foreground for s in samples]),
            images_to_array([s.background for s in samples]),
            depths_to_array([s.depth for s in samples]),
            images_to_array([s.ground_truth for s in samples]),
            masks_to_array([threshold_depth(s.depth, threshold) for s in samples]),
        )

    def __len__(self) -> int:
        return len(self.ids)

    def batch(self, idx):
        return (Tensor(self.fg[idx]), Tensor(self.bg[idx]), Tensor(self.depth[idx]), self.gt[idx], self.mask[idx])


@dataclass
class RunHistory:
    rows: List[dict] = field(default_factory=list)

    def record(self, row: dict) -> None:
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    def reports(self) -> List[LossReport]:
        return [LossReport(r["adv_g"], r["adv_d"], r["l1"], r["depth"], r["total_g"]) for r in self.rows]

    def write_csv(self, path) -> None:
        write_curves(self.rows, path)


def write_curves(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CURVE_FIELDS)
        for r in rows:
            writer.writerow([r["step"], r["epoch"]] + [repr(float(r[k])) for k in CURVE_FIELDS[2:]])


def read_curves(path) -> List[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k in ("step", "epoch") else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


@dataclass
class TrainResult:
    networks: Networks
    history: RunHistory
    collapse: CollapseReport
    checkpoint: Checkpoint
    step: int


def discriminator_input(config: DiscriminatorConfig, image: Tensor, gt: Tensor):
    """Arguments for the discriminator; the pair variant conditions on the ground truth."""
    return (image, gt) if config.disc_input == "pair" else (image,)


def patch_accuracy(real_logits: np.ndarray, fake_logits: np.ndarray) -> float:
    hits = np.count_nonzero(real_logits > 0) + np.count_nonzero(fake_logits < 0)
    return hits / (real_logits.size + fake_logits.size)


def _order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng(_seed_for(seed, f"order:{epoch}")).permutation(n)


def _check_finite(value: float, what: str, step: int) -> None:
    if not math.isfinite(value):
        raise TrainingAborted(f"{what} became non-finite at step {step}", step - 1 if step > 0 else None)


def training_checkpoint(config: TrainConfig, nets: Networks, opt_s: Adam, opt_g: Adam, opt_d: Adam, step: int,
                        tracker: Optional[DiversityTracker] = None) -> Checkpoint:
    entries = OrderedDict(nets.state())
    entries.update(opt_s.state_entries("adam_s"))
    entries.update(opt_g.state_entries("adam_g"))
    entries.update(opt_d.state_entries("adam_d"))
    entries["state.step"] = np.full((1, 1, 1, 1), step, dtype=DTYPE)
    for i, output in enumerate(tracker.raw if tracker else ()):
        entries[f"state.recent.{i:02d}"] = output[None]
    return Checkpoint(entries, config.architecture_hash())


def train(
    config: TrainConfig,
    samples,
    threshold: Optional[float] = None,
    resume: Optional[Checkpoint] = None,
    generator_mode: str = "trained",
    on_checkpoint: Optional[Callable[[Checkpoint, int], None]] = None,
) -> TrainResult:
    """Alternate one discriminator step and one generator step per batch.

    ``generator_mode="constant"`` replaces the generator output with a fixed
    mid-gray image and never updates it; it exists to build collapse fixtures.
    """
    if generator_mode not in ("trained", "constant"):
        raise ValueError(f"generator_mode must be 'trained' or 'constant', got {generator_mode!r}")
    if threshold is None:
        threshold = config.loss.depth_threshold
    if threshold is None:
        raise ConfigError("a depth threshold is required (loss.depth_threshold or the dataset manifest)")
    data = samples if isinstance(samples, TrainingData) else TrainingData.from_samples(samples, threshold)
    loss_cfg = config.loss
    betas = (config.adam_beta1, config.adam_beta2)

    nets = build_networks(config.generator, config.discriminator, config.stn, config.init, config.seed)
    opt_s = Adam([(f"stn.{k}", p) for k, p in nets.stn.named_parameters()], config.lr_g * config.stn_lr_scale, betas)
    opt_g = Adam([(f"generator.{k}", p) for k, p in nets.generator.named_parameters()], config.lr_g, betas)
    opt_d = Adam([(f"discriminator.{k}", p) for k, p in nets.discriminator.named_parameters()], config.lr_d, betas)
    step = 0
    if resume is not None:
        restore_networks(resume, nets, config.architecture_hash())
        opt_s.load_state_entries(resume.entries, "adam_s")
        opt_g.load_state_entries(resume.entries, "adam_g")
        opt_d.load_state_entries(resume.entries, "adam_d")
        step = int(resume.entries["state.step"].reshape(-1)[0]) if "state.step" in resume.entries else 0

    history = RunHistory()
    tracker = DiversityTracker()
    if resume is not None:
        for name in sorted(k for k in resume.entries if k.startswith("state.recent.")):
            tracker.add(resume.entries[name][0])
    total = config.total_steps(len(data))
    per_epoch = steps_per_epoch(len(data), config.batch_size)
    order, order_epoch = None, -1
    while step < total:
        epoch, pos = divmod(step, per_epoch)
        if epoch != order_epoch:
            order, order_epoch = _order(config.seed, epoch, len(data)), epoch
        idx = np.sort(order[pos * config.batch_size:(pos + 1) * config.batch_size])
        fg, bg, depth, gt_np, mask = data.batch(idx)
        gt = Tensor(gt_np)

        if generator_mode == "constant":
            with no_grad():
                fake = Tensor(np.zeros_like(gt_np))
        else:
            fake, _, _ = nets.composite(fg, bg, depth)

        # discriminator half-step on the detached fake
        opt_d.zero_grad()
        d_real = nets.discriminator(*discriminator_input(config.discriminator, gt, gt))
        d_fake = nets.discriminator(*discriminator_input(config.discriminator, fake.detach(), gt))
        d_loss = discriminator_loss(d_real, d_fake)
        _check_finite(d_loss.item(), "discriminator loss", step)
        backward(d_loss)
        opt_d.step(step)
        accuracy = patch_accuracy(d_real.data, d_fake.data)

        # generator half-step against the updated discriminator
        opt_g.zero_grad()
        opt_s.zero_grad()
        d_fake_g = nets.discriminator(*discriminator_input(config.discriminator, fake, gt))
        g_adv = generator_adversarial_loss(d_fake_g, loss_cfg.adversarial)
        l1 = l1_loss(fake, gt)
        dal = depth_aware_loss(fake, gt, mask)
        total_g = total_generator_objective(g_adv, l1, dal, loss_cfg)
        _check_finite(total_g.item(), "generator objective", step)
        if generator_mode == "trained":
            backward(total_g)
            opt_g.step(step)
            opt_s.step(step)
        opt_d.zero_grad()

        step += 1
        tracker.add(fake.data[0])
        history.record({
            "step": step, "epoch": epoch,
            "adv_g": g_adv.item(), "adv_d": d_loss.item(), "l1": l1.item(), "depth": dal.item(),
            "total_g": total_g.item(), "d_accuracy": accuracy, "diversity": tracker.diversity(),
        })
        if on_checkpoint and config.checkpoint_every and step % config.checkpoint_every == 0:
            on_checkpoint(training_checkpoint(config, nets, opt_s, opt_g, opt_d, step, tracker), step)

    collapse = detect_mode_collapse(history, config.collapse_window)
    return TrainResult(nets, history, collapse, training_checkpoint(config, nets, opt_s, opt_g, opt_d, step, tracker), step)


# ---------------------------------------------------------------------------
# inference and evaluation
# ---------------------------------------------------------------------------

def predict(networks: Networks, samples, batch_size: int = 8) -> List[ImageRgba]:
    out: List[ImageRgba] = []
    with no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            fg = Tensor(images_to_array([s.foreground for s in chunk]))
            bg = Tensor(images_to_array([s.background for s in chunk]))
            depth = Tensor(depths_to_array([s.depth for s in chunk]))
            pred, _, _ = networks.composite(fg, bg, depth)
            out.extend(array_to_images(pred.data))
    return out


def evaluate_predictions(predictions: Sequence[ImageRgba], samples, threshold: float, workers: int = 1) -> List[dict]:
    """Per-sample metric rows, in sample order regardless of ``workers``."""
    if len(predictions) != len(samples):
        raise ValueError(f"{len(predictions)} predictions for {len(samples)} samples")

    def one(pair):
        pred, s = pair
        return evaluate_pair(s.id, pred, s.ground_truth, threshold_depth(s.depth, threshold))

    pairs = list(zip(predictions, samples))
    if workers <= 1:
        return [one(p) for p in pairs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, pairs))


def evaluate(networks: Networks, samples, threshold: float, workers: int = 1) -> List[dict]:
    return evaluate_predictions(predict(networks, samples), samples, threshold, workers)
