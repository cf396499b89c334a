"""Adam with bias correction."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ..autodiff.tensor import DTYPE, Tensor
from ..errors import CheckpointError, TrainingAborted

EPS = 1e-8


@dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], 0)


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[Optional[np.ndarray]],
    state: AdamState,
    lr: float,
    betas: Tuple[float, float] = (0.5, 0.999),
    eps: float = EPS,
    step: Optional[int] = None,
) -> AdamState:
    """Apply one Adam update in place; missing gradients count as zero."""
    if len(state.m) != len(params):
        raise ValueError(f"optimizer state holds {len(state.m)} slots for {len(params)} parameters")
    for p, g in zip(params, grads):
        if g is not None and not np.all(np.isfinite(g)):
            raise TrainingAborted(f"non-finite gradient for parameter {p.name or p.shape}", step)
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m[i] = (b1 * state.m[i] + (1.0 - b1) * g).astype(DTYPE)
        v = state.v[i] = (b2 * state.v[i] + (1.0 - b2) * g * g).astype(DTYPE)
        update = (lr * (m / DTYPE(c1)) / (np.sqrt(v / DTYPE(c2)) + DTYPE(eps))).astype(DTYPE)
        p.data = (p.data - update).astype(DTYPE)
    return state


class Adam:
    """Adam over a fixed, named parameter list."""

    def __init__(self, named_params, lr: float, betas=(0.5, 0.999), eps: float = EPS):
        self.named = OrderedDict(named_params)
        self.lr, self.betas, self.eps = lr, tuple(betas), eps
        for name, p in self.named.items():
            p.name = name
        self.state = AdamState.zeros_like(list(self.named.values()))

    @property
    def params(self) -> List[Tensor]:
        return list(self.named.values())

    def zero_grad(self) -> None:
        for p in self.named.values():
            p.grad = None

    def step(self, step: Optional[int] = None) -> None:
        params = self.params
        adam_step(params, [p.grad for p in params], self.state, self.lr, self.betas, self.eps, step)

    def state_entries(self, prefix: str) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for i, name in enumerate(self.named):
            out[f"{prefix}.m.{name}"] = self.state.m[i]
            out[f"{prefix}.v.{name}"] = self.state.v[i]
        out[f"{prefix}.t"] = np.full((1, 1, 1, 1), self.state.t, dtype=DTYPE)
        return out

    def load_state_entries(self, entries, prefix: str) -> None:
        try:
            for i, name in enumerate(self.named):
                m = entries[f"{prefix}.m.{name}"]
                v = entries[f"{prefix}.v.{name}"]
                if m.shape != self.state.m[i].shape or v.shape != self.state.v[i].shape:
                    raise CheckpointError(f"optimizer slot {prefix}.{name}: shape {m.shape} vs {self.state.m[i].shape}")
                self.state.m[i] = np.array(m, dtype=DTYPE)
                self.state.v[i] = np.array(v, dtype=DTYPE)
            self.state.t = int(entries[f"{prefix}.t"].reshape(-1)[0])
        except KeyError as exc:
            raise CheckpointError(f"checkpoint lacks optimizer entry {exc.args[0]}") from None
