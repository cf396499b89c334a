"""scikit-learn style wrapper around training and inference."""

from __future__ import annotations

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .losses import LossConfig
from .metrics import METRIC_FIELDS, mean_row
from .networks import DiscriminatorConfig, GeneratorConfig, InitSpec
from .trainer.loop import TrainConfig, evaluate_predictions, predict, train
from .validation import check_samples, check_threshold


class DepthAwareCompositor(BaseEstimator):
    """Learns to place and depth-composite a foreground into a background.

    ``fit`` takes a list of :class:`~depthcomp.datagen.Sample`; ``predict``
    returns one composite per sample; ``score`` is the negated mean MAE on
    the 0-255 scale, so larger is better.
    """

    def __init__(self, steps=500, batch_size=1, lr_g=2e-4, lr_d=1e-4, lambda_l1=100.0, lambda_depth=100.0,
                 threshold=0.5, image_size=64, base_channels=16, extra_block=False, init="random_normal", seed=0):
        self.steps = steps
        self.batch_size = batch_size
        self.lr_g = lr_g
        self.lr_d = lr_d
        self.lambda_l1 = lambda_l1
        self.lambda_depth = lambda_depth
        self.threshold = threshold
        self.image_size = image_size
        self.base_channels = base_channels
        self.extra_block = extra_block
        self.init = init
        self.seed = seed

    def _train_config(self, n_samples: int) -> TrainConfig:
        epochs = max(1, -(-self.steps * self.batch_size // n_samples))
        return TrainConfig(
            epochs=epochs, batch_size=self.batch_size, max_steps=self.steps, lr_g=self.lr_g, lr_d=self.lr_d,
            seed=self.seed, loss=LossConfig(self.lambda_l1, self.lambda_depth, self.threshold),
            init=InitSpec(self.init),
            generator=GeneratorConfig(image_size=self.image_size, base_channels=self.base_channels),
            discriminator=DiscriminatorConfig(extra_block=self.extra_block),
        )

    def fit(self, X, y=None):
        samples = check_samples(X, self.image_size)
        threshold = check_threshold(self.threshold)
        result = train(self._train_config(len(samples)), samples, threshold)
        self.networks_ = result.networks
        self.history_ = result.history
        self.collapse_ = result.collapse
        self.n_steps_ = result.step
        return self

    def predict(self, X):
        check_is_fitted(self, "networks_")
        return predict(self.networks_, check_samples(X, self.image_size))

    def evaluate(self, X) -> dict:
        """Mean MAE, PSNR, SSIM and masked MAE against each sample's ground truth."""
        samples = check_samples(X, self.image_size)
        rows = evaluate_predictions(self.predict(samples), samples, check_threshold(self.threshold))
        row = mean_row(rows)
        return {k: row[k] for k in METRIC_FIELDS[1:]}

    def score(self, X, y=None) -> float:
        return -self.evaluate(X)["mae"]
