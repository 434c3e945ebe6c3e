"""
CavityLab Metrics

Overlap ratios, surface distances (HD95, ASD) and the Wilcoxon signed-rank
test used to compare losses across cases.

Conventions for degenerate inputs:
- dice = iou = 1 when both masks are empty, 0 when exactly one is empty
- precision, sensitivity, specificity are 0 when their denominator is 0
- surface distances are undefined (MetricUndefinedError) for empty masks
"""

import logging
import math
from collections.abc import Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import ndimage, stats
from scipy.spatial.distance import cdist

from cavitylab.core.exceptions import MetricUndefinedError, WilcoxonUndefinedError
from cavitylab.core.volume import BinaryMask, ensure_same_dims

logger = logging.getLogger(__name__)

# Above this many source points, distances come from a distance transform.
BRUTE_FORCE_MAX_POINTS = 5000
BRUTE_FORCE_CHUNK = 1024
HD_PERCENTILE = 0.95
WILCOXON_EXACT_MAX_N = 25
SIGNIFICANCE_ALPHA = 0.05

_SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)


class ConfusionCounts(BaseModel):
    """Voxel counts of a binary prediction against ground truth."""

    model_config = ConfigDict(frozen=True)

    tp: int = Field(..., ge=0)
    fp: int = Field(..., ge=0)
    tn: int = Field(..., ge=0)
    fn: int = Field(..., ge=0)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @classmethod
    def from_masks(cls, pred: BinaryMask, gt: BinaryMask) -> "ConfusionCounts":
        ensure_same_dims(pred, gt, "prediction and ground truth")
        p, g = pred.data, gt.data
        return cls(
            tp=int(np.sum(p & g)),
            fp=int(np.sum(p & ~g)),
            tn=int(np.sum(~p & ~g)),
            fn=int(np.sum(~p & g)),
        )


def _ratio(num: int, den: int) -> float:
    return num / den if den > 0 else 0.0


class OverlapMetrics(BaseModel):
    model_config = ConfigDict(frozen=True)

    dice: float
    iou: float
    acc: float
    precision: float
    sensitivity: float
    specificity: float


def overlap_metrics(pred: BinaryMask, gt: BinaryMask) -> OverlapMetrics:
    """Dice, IoU, accuracy, precision, sensitivity and specificity."""
    c = ConfusionCounts.from_masks(pred, gt)
    union = c.tp + c.fp + c.fn
    if union == 0:
        dice = iou = 1.0
    else:
        dice = 2.0 * c.tp / (2 * c.tp + c.fp + c.fn)
        iou = c.tp / union
    return OverlapMetrics(
        dice=dice,
        iou=iou,
        acc=_ratio(c.tp + c.tn, c.total),
        precision=_ratio(c.tp, c.tp + c.fp),
        sensitivity=_ratio(c.tp, c.tp + c.fn),
        specificity=_ratio(c.tn, c.tn + c.fp),
    )


# ---------------------------------------------------------------------------
# Surface distances
# ---------------------------------------------------------------------------


class SurfacePointSet(BaseModel):
    """Boundary voxels of a mask: grid indices and physical coordinates."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    indices: np.ndarray = Field(..., description="(K, 3) integer voxel indices")
    points: np.ndarray = Field(..., description="(K, 3) coordinates, index * spacing")
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]

    @model_validator(mode="after")
    def validate_shapes(self) -> "SurfacePointSet":
        if self.indices.shape != self.points.shape or self.points.shape[-1:] != (3,):
            raise ValueError("indices and points must both be (K, 3)")
        return self

    def __len__(self) -> int:
        return int(self.points.shape[0])

    @property
    def is_empty(self) -> bool:
        return len(self) == 0

    def as_mask(self) -> np.ndarray:
        out = np.zeros(self.dims, dtype=bool)
        if not self.is_empty:
            out[tuple(self.indices.T)] = True
        return out


def surface_points(
    mask: BinaryMask, spacing: tuple[float, float, float] | None = None
) -> SurfacePointSet:
    """
    Mask voxels with at least one background 6-neighbour.

    Voxels on the volume boundary count as surface (outside is background).
    """
    spacing = tuple(float(s) for s in (spacing or mask.spacing))
    data = mask.data
    interior = ndimage.binary_erosion(data, structure=_SIX_CONNECTED, border_value=0)
    indices = np.argwhere(data & ~interior)
    return SurfacePointSet(
        indices=indices,
        points=indices * np.asarray(spacing),
        dims=mask.dims,
        spacing=spacing,
    )


def _nearest_distances(src: SurfacePointSet, dst: SurfacePointSet) -> np.ndarray:
    """Distance from every src point to the closest dst point."""
    if len(src) <= BRUTE_FORCE_MAX_POINTS:
        out = np.empty(len(src))
        for start in range(0, len(src), BRUTE_FORCE_CHUNK):
            block = src.points[start : start + BRUTE_FORCE_CHUNK]
            out[start : start + len(block)] = cdist(block, dst.points).min(axis=1)
        return out
    field = ndimage.distance_transform_edt(~dst.as_mask(), sampling=dst.spacing)
    return field[tuple(src.indices.T)]


def _surfaces(
    pred: BinaryMask, gt: BinaryMask, spacing: tuple[float, float, float] | None
) -> tuple[SurfacePointSet, SurfacePointSet]:
    ensure_same_dims(pred, gt, "prediction and ground truth")
    if pred.is_empty or gt.is_empty:
        which = "both masks" if pred.is_empty and gt.is_empty else (
            "prediction" if pred.is_empty else "ground truth"
        )
        raise MetricUndefinedError(f"surface distance undefined: {which} empty")
    spacing = spacing or gt.spacing
    return surface_points(pred, spacing), surface_points(gt, spacing)


def _nearest_rank(values: np.ndarray, q: float) -> float:
    ordered = np.sort(values)
    rank = max(math.ceil(q * len(ordered)), 1)
    return float(ordered[rank - 1])


def hd95(
    pred: BinaryMask, gt: BinaryMask, spacing: tuple[float, float, float] | None = None
) -> float:
    """
    Symmetric 95th-percentile surface distance.

    Each direction takes the nearest-rank 95th percentile of its
    nearest-neighbour distances; the result is the larger of the two.

    Raises:
        MetricUndefinedError: If either mask is empty
    """
    sp, sg = _surfaces(pred, gt, spacing)
    return max(
        _nearest_rank(_nearest_distances(sp, sg), HD_PERCENTILE),
        _nearest_rank(_nearest_distances(sg, sp), HD_PERCENTILE),
    )


def asd(
    pred: BinaryMask, gt: BinaryMask, spacing: tuple[float, float, float] | None = None
) -> float:
    """Average surface distance: mean of the two directed mean distances."""
    sp, sg = _surfaces(pred, gt, spacing)
    return 0.5 * (
        float(_nearest_distances(sp, sg).mean()) + float(_nearest_distances(sg, sp).mean())
    )


class CaseMetrics(BaseModel):
    """Full metric battery for one case; distances are NaN when undefined."""

    dice: float
    iou: float
    acc: float
    precision: float
    sensitivity: float
    specificity: float
    hd95: float
    asd: float
    status: str = Field(..., description="ok, empty_pred, empty_gt or empty_both")


def evaluate_masks(
    pred: BinaryMask, gt: BinaryMask, spacing: tuple[float, float, float] | None = None
) -> CaseMetrics:
    """All metrics at once; undefined distances become a status instead of an error."""
    overlap = overlap_metrics(pred, gt)
    try:
        hd, mean_sd = hd95(pred, gt, spacing), asd(pred, gt, spacing)
        status = "ok"
    except MetricUndefinedError as e:
        logger.warning("%s", e)
        hd = mean_sd = float("nan")
        if pred.is_empty and gt.is_empty:
            status = "empty_both"
        elif pred.is_empty:
            status = "empty_pred"
        else:
            status = "empty_gt"
    return CaseMetrics(**overlap.model_dump(), hd95=hd, asd=mean_sd, status=status)


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank test
# ---------------------------------------------------------------------------


class WilcoxonResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    statistic: float = Field(..., description="Signed-rank sum W+ - W-")
    p_value: float = Field(..., ge=0, le=1)
    n_effective: int = Field(..., description="Pairs left after dropping zero differences")
    method: str = Field(..., description="exact or normal")

    def significant(self, alpha: float = SIGNIFICANCE_ALPHA) -> bool:
        return self.p_value < alpha


def _exact_p(doubled_ranks: np.ndarray, doubled_w_plus: int) -> float:
    """Two-sided p from the exact null distribution of W+ (ranks doubled to integers)."""
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=np.int64)
    counts[0] = 1
    for r in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    n_assignments = float(2 ** len(doubled_ranks))
    lower = counts[: doubled_w_plus + 1].sum() / n_assignments
    upper = counts[doubled_w_plus:].sum() / n_assignments
    return min(1.0, 2.0 * min(lower, upper))


def wilcoxon_signed_rank(
    a: np.ndarray | Sequence[float], b: np.ndarray | Sequence[float]
) -> WilcoxonResult:
    """
    Paired two-sided Wilcoxon signed-rank test of a against b.

    Zero differences are dropped and ties get mid-ranks. Up to 25 remaining
    pairs the exact null distribution is used; above that a normal
    approximation with tie correction.

    Raises:
        ValueError: If the samples are empty or differ in length
        WilcoxonUndefinedError: If every difference is zero
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size == 0:
        raise ValueError(f"need two equal-length non-empty samples, got {a.shape} and {b.shape}")

    diff = a - b
    diff = diff[diff != 0.0]
    n = diff.size
    if n == 0:
        raise WilcoxonUndefinedError("all paired differences are zero")

    ranks = stats.rankdata(np.abs(diff))
    w_plus = float(ranks[diff > 0].sum())
    w_minus = float(ranks[diff < 0].sum())
    statistic = w_plus - w_minus

    if n <= WILCOXON_EXACT_MAX_N:
        doubled = np.rint(2.0 * ranks).astype(np.int64)
        p = _exact_p(doubled, int(round(2.0 * w_plus)))
        return WilcoxonResult(statistic=statistic, p_value=p, n_effective=n, method="exact")

    _, tie_counts = np.unique(ranks, return_counts=True)
    mean = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_counts**3 - tie_counts)) / 48.0
    z = (w_plus - mean) / math.sqrt(var)
    p = min(1.0, 2.0 * float(stats.norm.sf(abs(z))))
    return WilcoxonResult(statistic=statistic, p_value=p, n_effective=n, method="normal")
