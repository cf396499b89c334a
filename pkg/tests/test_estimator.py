from __future__ import annotations

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from depthcomp import DepthAwareCompositor, generate_samples
from depthcomp.errors import DatasetError, ShapeError


@pytest.fixture(scope="module")
def samples():
    return generate_samples(6, seed=2, canvas=32)


def small(**kw):
    params = dict(steps=3, image_size=32, base_channels=4, seed=0)
    params.update(kw)
    return DepthAwareCompositor(**params)


class TestEstimator:
    def test_params_round_trip(self):
        est = small(lr_g=3e-4)
        assert est.get_params()["lr_g"] == 3e-4
        cloned = clone(est)
        assert cloned.get_params() == est.get_params()
        assert est.set_params(steps=7).steps == 7

    def test_fit_predict_score(self, samples):
        est = small().fit(samples)
        assert est.n_steps_ == 3 and len(est.history_) == 3
        preds = est.predict(samples[:2])
        assert len(preds) == 2 and preds[0].width == 32
        metrics = est.evaluate(samples)
        assert set(metrics) == {"mae", "psnr", "ssim", "masked_mae"}
        assert est.score(samples) == pytest.approx(-metrics["mae"])

    def test_deterministic(self, samples):
        a = small().fit(samples).predict(samples[:1])[0]
        b = small().fit(samples).predict(samples[:1])[0]
        assert np.array_equal(a.pixels, b.pixels)

    def test_not_fitted(self, samples):
        with pytest.raises(NotFittedError):
            small().predict(samples)

    def test_input_validation(self, samples):
        with pytest.raises(DatasetError):
            small().fit([])
        with pytest.raises(TypeError):
            small().fit([np.zeros((32, 32, 4))])
        with pytest.raises(ShapeError):
            small(image_size=64).fit(samples)
        with pytest.raises(ValueError):
            small(threshold=1.5).fit(samples)
