"""
CavityLab Multi-scale Filtering

Separable 3D Gaussian filtering with mirror boundaries, 2x2x2 mean-pool
downsampling, and the dyadic pyramid behind the multi-scale similarity loss.

Each linear operator here has an adjoint (``*_adjoint``) so that the loss
gradients can be pulled back through the pyramid exactly.

Mirror boundary means reflect-without-repeat (``d c b | a b c d | c b a``),
i.e. numpy's ``pad(mode="reflect")`` / scipy's ``mode="mirror"``.
"""

import logging
import math

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import ndimage

from cavitylab.core.volume import Volume

logger = logging.getLogger(__name__)

# De-facto SSIM window: 11 taps.
DEFAULT_WINDOW_SIGMA = 1.5
DEFAULT_WINDOW_RADIUS = 5


class GaussianKernel1D(BaseModel):
    """Normalized, symmetric 1D Gaussian taps."""

    model_config = ConfigDict(frozen=True)

    sigma: float = Field(..., gt=0)
    radius: int = Field(..., ge=0)
    weights: tuple[float, ...]

    @model_validator(mode="after")
    def validate_weights(self) -> "GaussianKernel1D":
        if len(self.weights) != 2 * self.radius + 1:
            raise ValueError("kernel must have 2*radius+1 weights")
        if any(w <= 0 for w in self.weights):
            raise ValueError("kernel weights must be positive")
        if abs(math.fsum(self.weights) - 1.0) > 1e-12:
            raise ValueError("kernel weights must sum to 1")
        return self

    @property
    def extent(self) -> int:
        """Window size 2*radius+1."""
        return 2 * self.radius + 1

    @property
    def taps(self) -> np.ndarray:
        return np.asarray(self.weights, dtype=np.float64)


def gaussian_kernel(
    sigma: float = DEFAULT_WINDOW_SIGMA, radius: int = DEFAULT_WINDOW_RADIUS
) -> GaussianKernel1D:
    """
    Build a unit-sum Gaussian kernel on the integer taps [-radius, radius].

    Raises:
        ValueError: If sigma is not positive or radius is negative
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-(t**2) / (2.0 * sigma**2))
    w /= math.fsum(w)
    return GaussianKernel1D(sigma=sigma, radius=radius, weights=tuple(float(x) for x in w))


def _mirror_indices(n: int, before: int, after: int) -> np.ndarray:
    """Source index for each position of a mirror-padded axis of length n."""
    return np.pad(np.arange(n), (before, after), mode="reflect")


def _fold_axis(padded: np.ndarray, index: np.ndarray, n: int, axis: int) -> np.ndarray:
    """Adjoint of ``np.take(x, index, axis)``: accumulate padded entries onto sources."""
    moved = np.moveaxis(padded, axis, 0)
    out = np.zeros((n,) + moved.shape[1:], dtype=np.float64)
    np.add.at(out, index, moved)
    return np.moveaxis(out, 0, axis)


# ---------------------------------------------------------------------------
# Separable filtering
# ---------------------------------------------------------------------------


def filter_axis(x: np.ndarray, taps: np.ndarray, axis: int) -> np.ndarray:
    """Correlate one axis with mirror boundary; output has the input's shape."""
    r = (len(taps) - 1) // 2
    if r == 0:
        return x * taps[0]
    n = x.shape[axis]
    padded = np.take(x, _mirror_indices(n, r, r), axis=axis)
    full = ndimage.correlate1d(padded, taps, axis=axis, mode="constant", cval=0.0)
    return np.take(full, np.arange(r, r + n), axis=axis)


def filter_axis_adjoint(g: np.ndarray, taps: np.ndarray, axis: int) -> np.ndarray:
    """Transpose of :func:`filter_axis`."""
    r = (len(taps) - 1) // 2
    if r == 0:
        return g * taps[0]
    n = g.shape[axis]
    pad_width = [(0, 0)] * g.ndim
    pad_width[axis] = (r, r)
    padded = np.pad(g, pad_width, mode="constant")
    full = ndimage.correlate1d(padded, taps[::-1], axis=axis, mode="constant", cval=0.0)
    return _fold_axis(full, _mirror_indices(n, r, r), n, axis)


def separable_filter(x: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Apply the taps along x, then y, then z."""
    out = np.asarray(x, dtype=np.float64)
    for axis in range(3):
        out = filter_axis(out, taps, axis)
    return out


def separable_filter_adjoint(g: np.ndarray, taps: np.ndarray) -> np.ndarray:
    out = np.asarray(g, dtype=np.float64)
    for axis in (2, 1, 0):
        out = filter_axis_adjoint(out, taps, axis)
    return out


def convolve_separable(v: Volume, k: GaussianKernel1D) -> Volume:
    """Gaussian-filter a volume with mirror boundary; dims are preserved."""
    return v.with_data(separable_filter(v.data, k.taps))


# ---------------------------------------------------------------------------
# Downsampling
# ---------------------------------------------------------------------------


def _pool_axis(x: np.ndarray, axis: int) -> np.ndarray:
    n = x.shape[axis]
    index = _mirror_indices(n, 0, n % 2)
    even = np.take(x, index, axis=axis)
    moved = np.moveaxis(even, axis, 0)
    pooled = 0.5 * (moved[0::2] + moved[1::2])
    return np.moveaxis(pooled, 0, axis)


def _pool_axis_adjoint(g: np.ndarray, n: int, axis: int) -> np.ndarray:
    index = _mirror_indices(n, 0, n % 2)
    spread = 0.5 * np.repeat(g, 2, axis=axis)
    return _fold_axis(spread, index, n, axis)


def downsample_array(x: np.ndarray) -> np.ndarray:
    """2x2x2 block mean after mirror-padding odd dims; output dims ceil(n/2)."""
    out = np.asarray(x, dtype=np.float64)
    for axis in range(3):
        out = _pool_axis(out, axis)
    return out


def downsample_adjoint(g: np.ndarray, fine_shape: tuple[int, ...]) -> np.ndarray:
    """Transpose of :func:`downsample_array` back onto ``fine_shape``."""
    out = np.asarray(g, dtype=np.float64)
    for axis in (2, 1, 0):
        out = _pool_axis_adjoint(out, fine_shape[axis], axis)
    return out


def downsample2(v: Volume) -> Volume:
    """Halve a volume by 2x2x2 mean pooling; spacing doubles."""
    spacing = tuple(2.0 * s for s in v.spacing)
    return Volume.from_array(downsample_array(v.data), spacing=spacing)


# ---------------------------------------------------------------------------
# Pyramid
# ---------------------------------------------------------------------------


def achievable_levels(dims: tuple[int, ...], levels: int, window_extent: int) -> int:
    """
    Number of pyramid levels that fit the window.

    Level 1 is always kept; level j+1 is added only if every dim of it is at
    least the window extent.
    """
    if levels < 1:
        raise ValueError(f"levels must be >= 1, got {levels}")
    achieved = 1
    current = tuple(dims)
    while achieved < levels:
        nxt = tuple(math.ceil(d / 2) for d in current)
        if min(nxt) < window_extent:
            break
        current = nxt
        achieved += 1
    return achieved


def pyramid_arrays(x: np.ndarray, levels: int) -> list[np.ndarray]:
    out = [np.asarray(x, dtype=np.float64)]
    for _ in range(levels - 1):
        out.append(downsample_array(out[-1]))
    return out


def build_pyramid(
    v: Volume, levels: int, radius: int = DEFAULT_WINDOW_RADIUS
) -> list[Volume]:
    """
    Build a finest-to-coarsest pyramid of up to ``levels`` volumes.

    Stops early when the next level would be smaller than the SSIM window
    (2*radius+1); the achieved count is ``len(result)``.
    """
    achieved = achievable_levels(v.dims, levels, 2 * radius + 1)
    if achieved < levels:
        logger.info(
            "Pyramid reduced from %d to %d levels for dims %s (window %d)",
            levels,
            achieved,
            v.dims,
            2 * radius + 1,
        )
    pyramid = [v]
    for _ in range(achieved - 1):
        pyramid.append(downsample2(pyramid[-1]))
    return pyramid
