"""
CavityLab Smoothness Penalty

Sum of squared forward differences of the inverted probability map along
x, y and z. Differences that would cross the volume boundary are omitted.
"""

from typing import Literal

import numpy as np

from cavitylab.core.volume import Volume

SmoothReduction = Literal["sum", "mean"]


def smooth_value_and_grad(
    delta: np.ndarray, reduction: SmoothReduction = "sum", need_grad: bool = True
) -> tuple[float, np.ndarray | None]:
    total = 0.0
    grad = np.zeros_like(delta, dtype=np.float64) if need_grad else None
    for axis in range(3):
        if delta.shape[axis] < 2:
            continue
        d = np.diff(delta, axis=axis)
        total += float(np.sum(d * d))
        if grad is not None:
            # d/d(delta) of sum(d^2): +2d at the far voxel, -2d at the near one.
            lo = [slice(None)] * 3
            hi = [slice(None)] * 3
            lo[axis] = slice(0, -1)
            hi[axis] = slice(1, None)
            grad[tuple(lo)] -= 2.0 * d
            grad[tuple(hi)] += 2.0 * d

    if reduction == "mean":
        total /= delta.size
        if grad is not None:
            grad /= delta.size
    elif reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    return total, grad


def smooth_loss(delta: Volume, reduction: SmoothReduction = "sum") -> float:
    """
    Smoothness penalty of a field.

    Args:
        delta: Field to penalize (normally the inverted probability map)
        reduction: "sum" for the literal sum, "mean" to divide by voxel count

    Returns:
        Non-negative scalar; 0 iff the field is constant
    """
    value, _ = smooth_value_and_grad(delta.data, reduction, need_grad=False)
    return value


def smooth_loss_grad(delta: Volume, reduction: SmoothReduction = "sum") -> Volume:
    """Exact gradient of :func:`smooth_loss` (a one-sided discrete negative Laplacian)."""
    _, grad = smooth_value_and_grad(delta.data, reduction)
    return delta.with_data(grad)
