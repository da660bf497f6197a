"""Central finite-difference gradient checks for the autograd ops."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autograd import Tensor


def numerical_gradient(fn: Callable[[], float], array: np.ndarray, step: float = 1e-3) -> np.ndarray:
    """d fn / d array by central differences, perturbing ``array`` in place."""
    grad = np.zeros_like(array, dtype=np.float64)
    flat, gflat = array.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        hi = fn()
        flat[i] = old - step
        lo = fn()
        flat[i] = old
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``|a - n| / max(|a|, |n|)`` in the 2-norm; 0 when both vanish."""
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if denom < 1e-12:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / denom)


def check_gradients(build: Callable[[Sequence[Tensor]], Tensor], inputs: Sequence[Tensor],
                    step: float = 1e-3) -> list:
    """Relative error per input of ``build(inputs)`` (a scalar) vs. finite differences.

    ``build`` must be deterministic; inputs are float64 tensors with
    ``requires_grad`` set.
    """
    for t in inputs:
        t.zero_grad()
    out = build(inputs)
    if out.data.size != 1:
        raise ValueError("gradient check needs a scalar output")
    out.backward()
    analytic = [t.grad.copy() for t in inputs]
    errors = []
    for t, a in zip(inputs, analytic):
        numeric = numerical_gradient(lambda: float(build(inputs).data), t.data, step)
        errors.append(relative_error(a, numeric))
    return errors
