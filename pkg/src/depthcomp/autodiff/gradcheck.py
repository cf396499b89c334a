"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import functional as F
from .tensor import DTYPE, Tensor, backward, oracle_precision

KINK_MARGIN = 1e-2


@dataclass
class OpCheck:
    """One differentiable op plus a sampler of random test configurations.

    ``sample(rng)`` returns ``(arrays, wrt)``: input arrays and the indices of
    inputs to differentiate. ``fn(*tensors)`` builds the output. ``valid``
    may reject a sample that sits too close to a non-smooth point.
    """

    name: str
    sample: Callable[[np.random.Generator], tuple]
    fn: Callable[..., Tensor]
    valid: Optional[Callable[[Sequence[np.ndarray]], bool]] = None


@dataclass
class OpResult:
    name: str
    trials: int
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error <= self.tolerance)


@dataclass
class GradCheckReport:
    results: List[OpResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def max_error(self, name: str) -> float:
        return next(r.max_rel_error for r in self.results if r.name == name)

    def lines(self) -> List[str]:
        return [
            f"{'PASS' if r.passed else 'FAIL'} {r.name}: max rel error {r.max_rel_error:.3e} "
            f"over {r.trials} trials (tol {r.tolerance:g})"
            for r in self.results
        ]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error ||a - n|| / max(||a||, ||n||); 0 when both vanish."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def check_gradients(
    fn: Callable[..., Tensor],
    arrays: Sequence[np.ndarray],
    wrt: Sequence[int],
    rng: np.random.Generator,
    step: float = 1e-3,
    max_coords: int = 24,
) -> float:
    """Max relative error over ``wrt`` inputs for one configuration.

    The scalar probed is ``sum(out * R)`` for a fixed random ``R``, which
    exercises every output entry. Up to ``max_coords`` input entries per
    input are perturbed.
    """
    arrays = [np.asarray(a, dtype=DTYPE) for a in arrays]
    tensors = [Tensor(a.copy(), requires_grad=(i in wrt)) for i, a in enumerate(arrays)]
    out = fn(*tensors)
    proj = rng.standard_normal(out.shape).astype(DTYPE)
    backward(F.sum(F.mul(out, proj)))

    def probe(vals):
        # the oracle re-evaluates the op in float64 at float32-perturbed points
        with oracle_precision():
            o = fn(*[Tensor(v.astype(np.float64)) for v in vals])
        return float(np.sum(o.data * proj.astype(np.float64)))

    worst = 0.0
    for i in wrt:
        analytic = tensors[i].grad
        flat_size = arrays[i].size
        idx = rng.choice(flat_size, size=min(max_coords, flat_size), replace=False)
        numeric = np.empty(len(idx))
        for k, flat in enumerate(idx):
            vals = [a.copy() for a in arrays]
            pos = np.unravel_index(flat, arrays[i].shape)
            vals[i][pos] = arrays[i][pos] + DTYPE(step)
            up = probe(vals)
            vals[i][pos] = arrays[i][pos] - DTYPE(step)
            down = probe(vals)
            # actual perturbation after float32 rounding
            h = float(np.float64(arrays[i][pos] + DTYPE(step)) - np.float64(arrays[i][pos] - DTYPE(step)))
            numeric[k] = (up - down) / h
        worst = max(worst, relative_error(analytic.ravel()[idx], numeric))
    return worst


def grad_check(op: OpCheck, trials: int = 20, tolerance: float = 1e-3, seed: int = 0, step: float = 1e-3) -> OpResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    done = 0
    attempts = 0
    while done < trials:
        attempts += 1
        if attempts > trials * 50:
            raise RuntimeError(f"{op.name}: could not sample configurations away from non-smooth points")
        arrays, wrt = op.sample(rng)
        if op.valid is not None and not op.valid(arrays):
            continue
        worst = max(worst, check_gradients(op.fn, arrays, wrt, rng, step=step))
        done += 1
    return OpResult(op.name, done, worst, tolerance)


def run_grad_checks(
    ops: Optional[Sequence[OpCheck]] = None, trials: int = 20, tolerance: float = 1e-3, seed: int = 0
) -> GradCheckReport:
    ops = default_op_checks() if ops is None else ops
    report = GradCheckReport()
    for k, op in enumerate(ops):
        report.results.append(grad_check(op, trials=trials, tolerance=tolerance, seed=seed + k))
    return report


# ---------------------------------------------------------------------------
# standard catalog
# ---------------------------------------------------------------------------

def _away_from_zero(rng, shape, margin=KINK_MARGIN):
    x = rng.standard_normal(shape)
    while True:
        bad = np.abs(x) < margin
        if not bad.any():
            return x.astype(DTYPE)
        x[bad] = rng.standard_normal(int(bad.sum()))


def _small_shape(rng, min_hw=2, max_hw=5, max_c=3):
    return (int(rng.integers(1, 3)), int(rng.integers(1, max_c + 1)),
            int(rng.integers(min_hw, max_hw + 1)), int(rng.integers(min_hw, max_hw + 1)))


def _unary(name, fn, kink=False):
    def sample(rng):
        shape = _small_shape(rng)
        x = _away_from_zero(rng, shape) if kink else rng.standard_normal(shape).astype(DTYPE)
        return [x], [0]
    return OpCheck(name, sample, fn)


def _conv_sample(rng):
    k = int(rng.integers(1, 4))
    stride = int(rng.integers(1, 3))
    padding = int(rng.integers(0, k))
    n, c, o = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
    h = int(rng.integers(k, 7))
    w = int(rng.integers(k, 7))
    x = rng.standard_normal((n, c, h, w)).astype(DTYPE)
    wt = rng.standard_normal((o, c, k, k)).astype(DTYPE)
    b = rng.standard_normal((1, o, 1, 1)).astype(DTYPE)
    return [x, wt, b, stride, padding], [0, 1, 2]


def _conv_fn(x, w, b, stride, padding):
    return F.conv2d(x, w, b, stride=int(stride.data.reshape(-1)[0]), padding=int(padding.data.reshape(-1)[0]))


def _boxed(sample):
    """Wrap integer hyper-parameters as 1-element arrays so they ride along as inputs."""
    def inner(rng):
        arrays, wrt = sample(rng)
        return [np.full((1, 1, 1, 1), a, dtype=DTYPE) if np.isscalar(a) else a for a in arrays], wrt
    return inner


def _convt_sample(rng):
    k = int(rng.integers(1, 5))
    stride = int(rng.integers(1, 3))
    padding = int(rng.integers(0, k)) if k > 1 else 0
    n, c, o = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
    while True:
        h, w = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        ho = F.conv_transpose_output_size(h, k, stride, padding)
        wo = F.conv_transpose_output_size(w, k, stride, padding)
        if (ho >= 1 and wo >= 1 and F.conv_output_size(ho, k, stride, padding) == h
                and F.conv_output_size(wo, k, stride, padding) == w):
            break
    x = rng.standard_normal((n, c, h, w)).astype(DTYPE)
    wt = rng.standard_normal((c, o, k, k)).astype(DTYPE)
    b = rng.standard_normal((1, o, 1, 1)).astype(DTYPE)
    return [x, wt, b, stride, padding], [0, 1, 2]


def _convt_fn(x, w, b, stride, padding):
    return F.conv2d_transpose(x, w, b, stride=int(stride.data.reshape(-1)[0]), padding=int(padding.data.reshape(-1)[0]))


def _affine_sample(rng, n):
    sx = rng.uniform(0.6, 1.6, n)
    sy = rng.uniform(0.6, 1.6, n)
    tx = rng.uniform(-0.5, 0.5, n)
    ty = rng.uniform(-0.5, 0.5, n)
    return np.stack([sx, sy, tx, ty], axis=1).reshape(n, 4, 1, 1).astype(DTYPE)


def _grid_sample(rng):
    n, c = int(rng.integers(1, 3)), int(rng.integers(1, 4))
    h, w = int(rng.integers(3, 8)), int(rng.integers(3, 8))
    x = rng.standard_normal((n, c, h, w)).astype(DTYPE)
    return [x, _affine_sample(rng, n)], [0, 1]


def _grid_valid(arrays, margin=0.02):
    """Reject samples whose source coordinates sit near a pixel-center kink."""
    x, a = arrays
    p = a.reshape(-1, 4).astype(np.float64)
    for size, s, t in ((x.shape[3], p[:, 0], p[:, 2]), (x.shape[2], p[:, 1], p[:, 3])):
        coords = F.source_coords(size, s, t)
        frac = coords - np.round(coords)
        if np.any(np.abs(frac) < margin):
            return False
    return True


def _binary_sample(rng, kink_second=False):
    shape = _small_shape(rng)
    a = rng.standard_normal(shape).astype(DTYPE)
    b = rng.standard_normal(shape).astype(DTYPE)
    return [a, b], [0, 1]


def _concat_sample(rng):
    n, h, w = int(rng.integers(1, 3)), int(rng.integers(2, 5)), int(rng.integers(2, 5))
    a = rng.standard_normal((n, int(rng.integers(1, 4)), h, w)).astype(DTYPE)
    b = rng.standard_normal((n, int(rng.integers(1, 4)), h, w)).astype(DTYPE)
    return [a, b], [0, 1]


def _bce_sample(rng):
    shape = _small_shape(rng)
    x = (3.0 * rng.standard_normal(shape)).astype(DTYPE)
    t = rng.uniform(0.0, 1.0, shape).astype(DTYPE)
    return [x, t], [0]


def _norm_sample(rng):
    n, c = int(rng.integers(1, 3)), int(rng.integers(1, 4))
    h, w = int(rng.integers(2, 5)), int(rng.integers(2, 5))
    x = (rng.standard_normal((n, c, h, w)) + rng.uniform(-1, 1)).astype(DTYPE)
    return [x], [0]


def _loss_pair_sample(rng):
    shape = (int(rng.integers(1, 3)), 4, int(rng.integers(2, 6)), int(rng.integers(2, 6)))
    pred = rng.uniform(-1, 1, shape).astype(DTYPE)
    target = rng.uniform(-1, 1, shape).astype(DTYPE)
    # keep |target - pred| clear of the abs kink
    diff = target - pred
    small = np.abs(diff) < KINK_MARGIN
    target[small] += DTYPE(3 * KINK_MARGIN)
    mask = (rng.uniform(size=(shape[0], 1, shape[2], shape[3])) > 0.5).astype(DTYPE)
    return [pred, target, mask], [0]


def _chain_sample(rng):
    arrays, _ = _conv_sample(rng)
    return arrays, [0, 1, 2]


def _chain_fn(x, w, b, stride, padding):
    return F.mean(F.leaky_relu(_conv_fn(x, w, b, stride, padding)))


def _chain_valid(arrays):
    x, w, b, s, p = arrays
    pre = _conv_fn(Tensor(x), Tensor(w), Tensor(b), Tensor(s), Tensor(p)).data
    return bool(np.all(np.abs(pre) >= KINK_MARGIN))


def _scale_range_fn(x):
    return F.log_scale_to_range(x, 4.0)


def default_op_checks() -> List[OpCheck]:
    from .. import losses

    return [
        OpCheck("conv2d", _boxed(_conv_sample), _conv_fn),
        OpCheck("conv2d_transpose", _boxed(_convt_sample), _convt_fn),
        OpCheck("grid_sample_bilinear", _grid_sample, F.grid_sample_bilinear, _grid_valid),
        _unary("abs", F.abs, kink=True),
        _unary("relu", F.relu, kink=True),
        _unary("leaky_relu", F.leaky_relu, kink=True),
        _unary("tanh", F.tanh),
        _unary("sigmoid", F.sigmoid),
        _unary("exp", F.exp),
        _unary("log_scale_to_range", _scale_range_fn),
        OpCheck("add", _binary_sample, F.add),
        OpCheck("sub", _binary_sample, F.sub),
        OpCheck("mul", _binary_sample, F.mul),
        OpCheck("concat", _concat_sample, lambda a, b: F.concat([a, b])),
        OpCheck("channel_slice", _norm_sample, lambda a: F.channel_slice(a, 0, 1)),
        OpCheck("sum", _norm_sample, F.sum),
        OpCheck("mean", _norm_sample, F.mean),
        OpCheck("spatial_mean", _norm_sample, F.spatial_mean),
        OpCheck("instance_norm", _norm_sample, F.instance_norm),
        OpCheck("bce_with_logits", _bce_sample, F.bce_with_logits),
        OpCheck("l1_loss", _loss_pair_sample, lambda p, t, m: losses.l1_loss(p, t)),
        OpCheck("depth_aware_loss", _loss_pair_sample, lambda p, t, m: losses.depth_aware_loss(p, t, m.data)),
        OpCheck("conv2d>leaky_relu>mean", _boxed(_chain_sample), _chain_fn, _chain_valid),
    ]


def catalog() -> Dict[str, OpCheck]:
    return {op.name: op for op in default_op_checks()}
