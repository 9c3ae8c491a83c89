"""Central finite-difference gradient checking."""
from __future__ import annotations
from typing import Callable, Sequence, Tuple

import numpy as np

from svlb.errors import ContractError
from svlb.tensor import Tensor, backward, no_grad


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5, rtol: float = 1e-4,
              atol: float = 1e-6) -> Tuple[bool, float]:
    """Compare analytic and numeric gradients of scalar `fn(*inputs)` for every input that requires grad.

    An entry passes when |analytic - numeric| <= atol + rtol * max(|analytic|, |numeric|).
    Returns (all passed, worst relative error).
    """
    inputs = list(inputs)
    if any(t.dtype != np.float64 for t in inputs):
        raise ContractError("gradcheck needs float64 inputs")
    for t in inputs:
        t.grad = None
    out = fn(*inputs)
    if out.data.size != 1:
        raise ContractError("gradcheck needs a scalar function")
    backward(out)

    ok, worst = True, 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                plus = fn(*inputs).item()
                flat[i] = orig - h
                minus = fn(*inputs).item()
            flat[i] = orig
            numeric = (plus - minus) / (2.0 * h)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric)
            scale = max(abs(a), abs(numeric))
            if err > atol + rtol * scale:
                ok = False
            if scale > atol:
                worst = max(worst, err / scale)
    return ok, worst
