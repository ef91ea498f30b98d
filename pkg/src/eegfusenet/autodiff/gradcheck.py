"""Central-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import GradCheckError
from .tensor import Tensor


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max over coordinates of ``|analytic - numeric| / max(1, |numeric|)``.

    ``f`` maps the input tensors to a scalar tensor.  Inputs are promoted to
    float64 and perturbed in place one coordinate at a time.
    """
    inputs = [Tensor(np.array(t.data, dtype=np.float64), requires_grad=True) for t in inputs]
    loss = f(*inputs)
    if not np.all(np.isfinite(loss.data)):
        raise GradCheckError("non-finite output at the unperturbed point")
    for t in inputs:
        t.grad = None
    loss.backward()
    worst = 0.0
    for k, t in enumerate(inputs):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(f(*inputs).data)
            flat[i] = orig - eps
            down = float(f(*inputs).data)
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise GradCheckError(f"non-finite output perturbing input {k} coordinate {i}")
            numeric = (up - down) / (2 * eps)
            err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
