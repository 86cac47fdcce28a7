"""Checked dense-array operations shared by every other module.

Tensors are plain numpy arrays in row-major layout. The axis convention
throughout the package is (task-height, width, channel); coordinates are
(row, col) pairs. All functions validate shapes and raise ValueError on
contract violations instead of relying on numpy broadcasting surprises.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np


def concat(tensors: Sequence[np.ndarray], axis: int) -> np.ndarray:
    """Concatenate along `axis`; all other dims must match exactly."""
    if len(tensors) == 0:
        raise ValueError("concat requires at least one tensor")
    first = tensors[0]
    if not -first.ndim <= axis < first.ndim:
        raise ValueError(f"axis {axis} out of range for rank {first.ndim}")
    ax = axis % first.ndim
    for i, t in enumerate(tensors[1:], start=1):
        if t.ndim != first.ndim:
            raise ValueError(f"rank mismatch at input {i}: {t.ndim} != {first.ndim}")
        for d in range(first.ndim):
            if d != ax and t.shape[d] != first.shape[d]:
                raise ValueError(
                    f"shape mismatch off axis {ax} at input {i}: "
                    f"{t.shape} vs {first.shape}")
    return np.concatenate(tensors, axis=ax)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Rank-2 matrix product with an explicit inner-dimension check."""
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects rank-2 operands, got {a.ndim} and {b.ndim}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dims disagree: {a.shape} @ {b.shape}")
    return a @ b


def slice_rows(x: np.ndarray, start: int, length: int) -> np.ndarray:
    """Copy out `length` contiguous rows of `x` beginning at `start`."""
    if start < 0 or length < 0 or start + length > x.shape[0]:
        raise ValueError(
            f"row slice [{start}, {start + length}) out of range for dim0={x.shape[0]}")
    return x[start:start + length].copy()


def require_finite(x: np.ndarray, what: str = "tensor") -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{what} contains NaN or Inf")
