"""Parameter initialization and the Adam update."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import DimensionError
from .tensor import Tensor


def fans(shape: Sequence[int], groups: int = 1) -> tuple[int, int]:
    """Fan-in / fan-out used by Glorot initialization.

    2-D weights are ``[in, out]``.  4-D conv kernels ``[Cout, Cin/groups, kh, kw]``
    give ``fan_in = Cin/groups*kh*kw`` and ``fan_out = Cout/groups*kh*kw``.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) == 1:
        return shape[0], shape[0]
    if len(shape) == 2:
        return shape[0], shape[1]
    receptive = int(np.prod(shape[2:]))
    return shape[1] * receptive, (shape[0] // groups) * receptive


def glorot_bound(shape, groups: int = 1) -> float:
    fan_in, fan_out = fans(shape, groups)
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def glorot_init(shape, seed=None, groups: int = 1, dtype=np.float64, rng: np.random.Generator | None = None) -> Tensor:
    """Uniform Glorot sample on ``±sqrt(6 / (fan_in + fan_out))``."""
    if rng is None:
        rng = np.random.default_rng(seed)
    bound = glorot_bound(shape, groups)
    data = rng.uniform(-bound, bound, size=tuple(shape)).astype(dtype)
    return Tensor(data, requires_grad=True)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState, lr: float) -> AdamState:
    """One in-place Adam update of ``params``; returns ``state`` advanced by a step."""
    if len(params) != len(grads):
        raise DimensionError(f"adam_step: {len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise DimensionError(f"adam_step: state tracks {len(state.m)} params, got {len(params)}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape or state.m[i].shape != p.data.shape:
            raise DimensionError(f"adam_step: param {i} has shape {p.data.shape}, grad {g.shape}")
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        update = lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)
        p.data = (p.data - update).astype(p.data.dtype, copy=False)
    return state


class Adam:
    """Stateful wrapper: ``opt.step()`` after ``loss.backward()``."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.state = AdamState(beta1, beta2, eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state, self.lr)
