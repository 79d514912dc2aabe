"""Central-difference validation of analytic gradients."""

from __future__ import annotations

import numpy as np

from .tensor import NumericError, Tensor


def analytic_gradients(fn, tensors: list[Tensor]) -> list[np.ndarray]:
    """Gradients of the scalar fn() w.r.t. each tensor, via backward()."""
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    out = fn()
    if out.data.size != 1:
        raise ValueError("gradcheck target must be scalar valued")
    if not np.all(np.isfinite(out.data)):
        raise NumericError("non-finite output in gradcheck")
    out.backward()
    return [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]


def numeric_gradients(fn, tensors: list[Tensor], eps: float = 1e-4) -> list[np.ndarray]:
    """Per-coordinate central differences of the scalar fn()."""
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(fn().data)
            flat[i] = orig - eps
            lo = float(fn().data)
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NumericError("non-finite output in gradcheck")
            gflat[i] = (hi - lo) / (2.0 * eps)
        grads.append(g)
    return grads


def max_relative_error(analytic: list[np.ndarray], numeric: list[np.ndarray]) -> float:
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def grad_check(fn, tensors: list[Tensor], eps: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    fn must rebuild the graph from `tensors` on every call and return a
    scalar Tensor.
    """
    analytic = analytic_gradients(fn, tensors)
    numeric = numeric_gradients(fn, tensors, eps=eps)
    return max_relative_error(analytic, numeric)
