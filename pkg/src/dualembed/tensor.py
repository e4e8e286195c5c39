"""Dense array primitives.

Tensors are plain ``numpy.ndarray`` values in row-major (C) order. The helpers
here add the shape checks and edge-case rules the rest of the engine relies on
(lowest-index argmax ties, central-difference gradient checks).
"""
from __future__ import annotations

from typing import Callable, Union

import numpy as np

Tensor = np.ndarray
Scalar = Union[int, float]


class ShapeError(ValueError):
    pass


def as_tensor(values, dtype=np.float64) -> Tensor:
    return np.ascontiguousarray(np.asarray(values, dtype=dtype))


def _check_same(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def elementwise(op: str, a: Tensor, b: Union[Tensor, Scalar, None] = None) -> Tensor:
    """Apply a pointwise op. ``b`` must have a's shape or be a scalar."""
    a = np.asarray(a)
    if op == "relu":
        return np.maximum(a, 0)
    if op == "relu_grad":
        # b is the upstream gradient; a is the pre-activation input
        b = np.asarray(b)
        _check_same(a, b, op)
        return np.where(a > 0, b, 0).astype(np.result_type(a, b))
    if op == "scale":
        if not np.isscalar(b):
            raise ShapeError(f"scale expects a scalar factor, got shape {np.shape(b)}")
        return a * b
    if not np.isscalar(b):
        b = np.asarray(b)
        _check_same(a, b, op)
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    if op == "mul":
        return a * b
    raise ValueError(f"unknown elementwise op {op!r}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = np.asarray(a), np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


def reduce(op: str, a: Tensor, axis: int | None = None):
    a = np.asarray(a)
    if a.size == 0:
        raise ValueError("cannot reduce an empty tensor")
    if axis is not None and not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"axis {axis} out of range for rank {a.ndim}")
    if op == "sum":
        return a.sum(axis=axis)
    if op == "mean":
        return a.mean(axis=axis)
    if op == "max":
        return a.max(axis=axis)
    if op == "argmax":
        # np.argmax already returns the first occurrence on ties
        out = np.argmax(a, axis=axis)
        return int(out) if axis is None else out
    raise ValueError(f"unknown reduction {op!r}")


def l2sq_distance(a: Tensor, b: Tensor) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    _check_same(a, b, "l2sq_distance")
    d = a - b
    return float(np.dot(d.ravel(), d.ravel()))


def finite_diff_grad(f: Callable[[Tensor], float], x: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar function, one coordinate at a time.

    ``x`` is perturbed in place on a private copy; ``f`` must not keep references
    to its argument between calls.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at coordinate {i}")
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def max_relative_error(analytic: Tensor, numeric: Tensor, floor: float = 1e-8) -> float:
    """Largest |a-n| / max(|a|, |n|, floor) over all entries."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    _check_same(analytic, numeric, "max_relative_error")
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0
