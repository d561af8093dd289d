"""Finite-difference verification of tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import ContractError, NumericError
from .tensor import Tensor


def numeric_grad(f: Callable[..., Tensor], inputs: Sequence[Tensor], index: int, eps: float) -> np.ndarray:
    """Central-difference gradient of scalar ``f(*inputs)`` wrt ``inputs[index]``."""
    target = inputs[index]
    flat = target.data.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        plus = float(f(*inputs).data)
        flat[i] = orig - eps
        minus = float(f(*inputs).data)
        flat[i] = orig
        if not (np.isfinite(plus) and np.isfinite(minus)):
            raise NumericError("non-finite value during finite differencing")
        out[i] = (plus - minus) / (2 * eps)
    return out.reshape(target.shape)


def analytic_grads(f: Callable[..., Tensor], inputs: Sequence[Tensor]) -> list[np.ndarray]:
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    loss = f(*inputs)
    if loss.size != 1:
        raise ContractError(f"grad_check needs a scalar function, got shape {loss.shape}")
    if not np.all(np.isfinite(loss.data)):
        raise NumericError("non-finite function value")
    loss.backward()
    return [np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64) for t in inputs]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-6) -> float:
    """Max relative error between tape and central-difference gradients.

    The error of each input tensor is ``max|analytic - numeric|`` divided by
    ``max(max|analytic|, max|numeric|, 1e-8)``; the worst tensor is returned.
    Inputs should be float64 for tight results.
    """
    inputs = list(inputs)
    for t in inputs:
        if not np.all(np.isfinite(t.data)):
            raise NumericError("grad_check inputs must be finite")
    analytic = analytic_grads(f, inputs)
    worst = 0.0
    for i, a in enumerate(analytic):
        n = numeric_grad(f, inputs, i, eps)
        worst = max(worst, relative_error(a, n))
    return worst
