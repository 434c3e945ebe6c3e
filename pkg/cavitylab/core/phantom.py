"""
CavityLab Phantoms

Deterministic synthetic preop/postop pairs with a known removed region,
controlled weak-label corruption, voxel features for the weak-label
predictor, and flip augmentation.

Randomness
----------
Every random draw comes from a PCG64 generator seeded by
``np.random.SeedSequence(seed, spawn_key=(purpose,))``. Each purpose
(air cells, cavity walk, streaks, noise, corruption steps) has its own
substream, so changing e.g. ``streak_count`` never perturbs the cavity.
Per-case seeds are split from a global seed the same way (see
:func:`derive_seed`).
"""

import json
import logging
from enum import IntEnum
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationInfo, field_validator, model_validator
from scipy import ndimage

from cavitylab.core.exceptions import PhantomGenerationError
from cavitylab.core.multiscale import gaussian_kernel, separable_filter
from cavitylab.core.volume import (
    BinaryMask,
    Volume,
    ensure_same_dims,
    load_volume,
    save_volume,
)

logger = logging.getLogger(__name__)

MIN_PHANTOM_DIM = 16
BACKGROUND_LEVEL = 0.0
MAX_DIRECTION_RETRIES = 200

PREOP_FILE = "preop.vol"
POSTOP_FILE = "postop.vol"
GT_MASK_FILE = "gt_mask.vol"
SPEC_FILE = "spec.json"


class Purpose(IntEnum):
    """Substream identifiers (the SeedSequence spawn key)."""

    AIR_CELLS = 0
    CAVITY = 1
    BIAS = 2
    STREAKS_PRE = 3
    STREAKS_POST = 4
    NOISE_PRE = 5
    NOISE_POST = 6
    MORPHOLOGY = 10
    BLOBS = 11
    FLIPS = 12


def substream(seed: int, purpose: Purpose | int) -> np.random.Generator:
    """Independent generator for one purpose of one seed."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(int(purpose),))))


def derive_seed(global_seed: int, index: int) -> int:
    """Seed of case ``index`` under ``global_seed``; reproducible in isolation."""
    state = np.random.SeedSequence(global_seed, spawn_key=(index,)).generate_state(1, np.uint64)
    return int(state[0])


def _ordered_pair(v: tuple, name: str) -> tuple:
    if v[0] > v[1]:
        raise ValueError(f"{name} range must be (low, high), got {v}")
    return v


class PhantomSpec(BaseModel):
    """Parameters of one synthetic preop/postop pair."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    dims: tuple[int, int, int] = Field(default=(32, 32, 32))
    seed: int = Field(default=0, ge=0)
    bone_level: float = Field(default=0.8, ge=0, le=1)
    air_cell_count: int = Field(default=40, ge=0)
    air_cell_radius: tuple[int, int] = Field(default=(1, 2))
    air_level: float = Field(default=0.05, ge=0, le=1)
    cavity_walk_steps: tuple[int, int] = Field(default=(10, 30))
    cavity_radius: tuple[int, int] = Field(default=(3, 6))
    cavity_step_length: float = Field(default=2.0, gt=0)
    cavity_fill_level: float = Field(default=0.1, ge=0, le=1)
    noise_sigma: float = Field(default=0.03, ge=0)
    streak_count: int = Field(default=3, ge=0)
    streak_level: float = Field(default=1.0, ge=0, le=1)
    streak_width: int = Field(default=1, ge=1)
    bias_amplitude: float = Field(default=0.2, ge=0, lt=1)

    @field_validator("dims")
    @classmethod
    def dims_must_fit_anatomy(cls, v: tuple[int, int, int]) -> tuple[int, int, int]:
        if any(d < MIN_PHANTOM_DIM for d in v):
            raise ValueError(f"phantom dims must be >= {MIN_PHANTOM_DIM} per axis, got {v}")
        return v

    @field_validator("air_cell_radius", "cavity_radius")
    @classmethod
    def radii_must_be_ordered(cls, v: tuple[int, int], info: ValidationInfo) -> tuple[int, int]:
        if v[0] < 1:
            raise ValueError(f"{info.field_name} must be >= 1")
        return _ordered_pair(v, info.field_name)

    @field_validator("cavity_walk_steps")
    @classmethod
    def steps_must_be_ordered(cls, v: tuple[int, int]) -> tuple[int, int]:
        if v[0] < 1:
            raise ValueError("cavity_walk_steps must be >= 1")
        return _ordered_pair(v, "cavity_walk_steps")

    def bone_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Half-open [lo, hi) bounds of the bone block."""
        dims = np.asarray(self.dims)
        margin = dims // 8
        return margin, dims - margin


class PhantomPair(BaseModel):
    """A preop/postop pair with the ground-truth removed region."""

    model_config = ConfigDict(frozen=True)

    preop: Volume
    postop: Volume
    gt_mask: BinaryMask
    spec: PhantomSpec

    @model_validator(mode="after")
    def validate_pair(self) -> "PhantomPair":
        ensure_same_dims(self.preop, self.postop, "preop and postop")
        ensure_same_dims(self.preop, self.gt_mask, "scans and gt_mask")
        if self.gt_mask.is_empty:
            raise ValueError("gt_mask must not be empty")
        return self


Grid = tuple[np.ndarray, np.ndarray, np.ndarray]


def _grid(dims: tuple[int, int, int]) -> Grid:
    return np.meshgrid(*(np.arange(d, dtype=np.float64) for d in dims), indexing="ij")


def _sphere(grid: Grid, center: np.ndarray, radius: float) -> np.ndarray:
    gx, gy, gz = grid
    return (gx - center[0]) ** 2 + (gy - center[1]) ** 2 + (gz - center[2]) ** 2 <= radius**2


def _box_mask(dims: tuple[int, int, int], lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    out = np.zeros(dims, dtype=bool)
    out[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]] = True
    return out


def _random_direction(rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal(3)
    norm = np.linalg.norm(v)
    return v / norm if norm > 0 else np.array([1.0, 0.0, 0.0])


def _carve_cavity(spec: PhantomSpec, grid: Grid, bone: np.ndarray) -> np.ndarray:
    """Union of spheres along a random walk confined to the (+,+,+) octant of the bone block."""
    rng = substream(spec.seed, Purpose.CAVITY)
    lo, hi = spec.bone_bounds()
    mid = (lo + hi) // 2
    # Centers keep the largest sphere off the far faces where dims allow; the box is
    # never narrower than two steps.
    box_lo = mid.astype(np.float64)
    box_hi = np.minimum(
        np.maximum(hi - 1 - spec.cavity_radius[1], mid + 2.0 * spec.cavity_step_length),
        hi - 1,
    ).astype(np.float64)

    center = (box_lo + box_hi) / 2.0
    steps = int(rng.integers(spec.cavity_walk_steps[0], spec.cavity_walk_steps[1] + 1))
    cavity = np.zeros(spec.dims, dtype=bool)

    for _ in range(steps):
        radius = float(rng.integers(spec.cavity_radius[0], spec.cavity_radius[1] + 1))
        cavity |= _sphere(grid, center, radius)
        for _attempt in range(MAX_DIRECTION_RETRIES):
            candidate = center + spec.cavity_step_length * _random_direction(rng)
            if np.all(candidate >= box_lo) and np.all(candidate <= box_hi):
                center = candidate
                break
        else:
            raise PhantomGenerationError(
                f"cavity walk left its admissible box after {MAX_DIRECTION_RETRIES} retries "
                f"(seed {spec.seed}, dims {spec.dims})"
            )

    cavity &= bone
    if not cavity.any():
        raise PhantomGenerationError(f"cavity is empty (seed {spec.seed}, dims {spec.dims})")
    return cavity


def _air_cells(spec: PhantomSpec, grid: Grid, bone: np.ndarray) -> np.ndarray:
    rng = substream(spec.seed, Purpose.AIR_CELLS)
    lo, hi = spec.bone_bounds()
    cells = np.zeros(spec.dims, dtype=bool)
    for _ in range(spec.air_cell_count):
        center = rng.uniform(lo, hi)
        radius = float(rng.integers(spec.air_cell_radius[0], spec.air_cell_radius[1] + 1))
        cells |= _sphere(grid, center, radius)
    return cells & bone


def _bias_field(spec: PhantomSpec, grid: Grid) -> np.ndarray:
    """Multiplicative 1 + a * (linear ramp along a random direction), ramp in [-0.5, 0.5]-scaled coords."""
    if spec.bias_amplitude == 0.0:
        return np.ones(spec.dims)
    rng = substream(spec.seed, Purpose.BIAS)
    direction = _random_direction(rng)
    ramp = sum(
        direction[a] * (grid[a] / max(spec.dims[a] - 1, 1) - 0.5) for a in range(3)
    )
    return 1.0 + spec.bias_amplitude * ramp


def _streaks(spec: PhantomSpec, purpose: Purpose) -> np.ndarray:
    """Straight lines between two random points, ``streak_width`` voxels thick."""
    rng = substream(spec.seed, purpose)
    dims = np.asarray(spec.dims)
    out = np.zeros(spec.dims, dtype=bool)
    for _ in range(spec.streak_count):
        a = rng.uniform(0, dims)
        b = rng.uniform(0, dims)
        n = int(np.ceil(2.0 * np.linalg.norm(b - a))) + 1
        points = a + np.linspace(0.0, 1.0, n)[:, None] * (b - a)
        idx = np.clip(np.floor(points).astype(int), 0, dims - 1)
        out[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    if spec.streak_width > 1 and out.any():
        structure = np.ones((spec.streak_width,) * 3, dtype=bool)
        out = ndimage.binary_dilation(out, structure=structure)
    return out


def _acquire(spec: PhantomSpec, clean: np.ndarray, bias: np.ndarray, streak: Purpose, noise: Purpose) -> np.ndarray:
    scan = clean * bias
    if spec.streak_count > 0:
        scan = np.where(_streaks(spec, streak), spec.streak_level, scan)
    if spec.noise_sigma > 0:
        scan = scan + substream(spec.seed, noise).normal(0.0, spec.noise_sigma, spec.dims)
    return scan


def generate_phantom(spec: PhantomSpec | None = None) -> PhantomPair:
    """
    Build a preop/postop pair.

    Preop: background, a bone block with carved air cells, then a shared
    bias field, independent streaks and independent Gaussian noise. Postop:
    the same anatomy with the cavity set to ``cavity_fill_level`` before the
    bias, streaks and noise.

    Raises:
        PhantomGenerationError: If the cavity walk cannot stay inside its box
    """
    spec = spec or PhantomSpec()
    grid = _grid(spec.dims)
    lo, hi = spec.bone_bounds()
    bone = _box_mask(spec.dims, lo, hi)

    anatomy = np.full(spec.dims, BACKGROUND_LEVEL)
    anatomy[bone] = spec.bone_level
    anatomy[_air_cells(spec, grid, bone)] = spec.air_level

    cavity = _carve_cavity(spec, grid, bone)
    removed = anatomy.copy()
    removed[cavity] = spec.cavity_fill_level

    bias = _bias_field(spec, grid)
    preop = _acquire(spec, anatomy, bias, Purpose.STREAKS_PRE, Purpose.NOISE_PRE)
    postop = _acquire(spec, removed, bias, Purpose.STREAKS_POST, Purpose.NOISE_POST)

    logger.debug(
        "Phantom seed=%d dims=%s cavity=%d voxels (%.2f%%)",
        spec.seed,
        spec.dims,
        int(cavity.sum()),
        100.0 * cavity.mean(),
    )
    return PhantomPair(
        preop=Volume.from_array(preop),
        postop=Volume.from_array(postop),
        gt_mask=BinaryMask.from_array(cavity),
        spec=spec,
    )


def save_phantom_pair(pair: PhantomPair, directory: str | Path) -> Path:
    """Write preop, postop and gt_mask as VOL1 files plus spec.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_volume(pair.preop, directory / PREOP_FILE)
    save_volume(pair.postop, directory / POSTOP_FILE)
    save_volume(pair.gt_mask, directory / GT_MASK_FILE)
    (directory / SPEC_FILE).write_text(json.dumps(pair.spec.model_dump(mode="json"), indent=2))
    return directory


def load_phantom_pair(directory: str | Path) -> PhantomPair:
    """Read a pair written by :func:`save_phantom_pair`."""
    directory = Path(directory)
    preop = load_volume(directory / PREOP_FILE)
    postop = load_volume(directory / POSTOP_FILE)
    gt_mask = load_volume(directory / GT_MASK_FILE)
    if not isinstance(preop, Volume) or not isinstance(postop, Volume):
        raise PhantomGenerationError(f"{directory}: scans must be scalar VOL1 files")
    if not isinstance(gt_mask, BinaryMask):
        raise PhantomGenerationError(f"{directory}: gt_mask must be a mask VOL1 file")
    spec = PhantomSpec.model_validate_json((directory / SPEC_FILE).read_text())
    return PhantomPair(preop=preop, postop=postop, gt_mask=gt_mask, spec=spec)


# ---------------------------------------------------------------------------
# Weak labels
# ---------------------------------------------------------------------------


class CorruptionSpec(BaseModel):
    """How ground truth is degraded into a weak label."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    morph_radius: int | None = Field(
        default=None, description="+n dilate, -n erode, None draws +1 or -1"
    )
    flip_rate: float = Field(default=0.1, ge=0, le=1)
    blob_count: int = Field(default=2, ge=0)
    blob_radius: int = Field(default=2, ge=0)
    seed: int = Field(default=0, ge=0)

    @classmethod
    def identity(cls) -> "CorruptionSpec":
        return cls(morph_radius=0, flip_rate=0.0, blob_count=0)


_SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)


def corrupt_mask(mask: BinaryMask, c: CorruptionSpec | None = None) -> BinaryMask:
    """
    Degrade a mask: |morph_radius| rounds of 6-neighbourhood dilation or
    erosion, then random blobs added or removed, then independent voxel flips.
    """
    c = c or CorruptionSpec()
    data = mask.data.copy()

    radius = c.morph_radius
    if radius is None:
        radius = 1 if substream(c.seed, Purpose.MORPHOLOGY).random() < 0.5 else -1
    if radius > 0:
        data = ndimage.binary_dilation(data, structure=_SIX_CONNECTED, iterations=radius)
    elif radius < 0:
        data = ndimage.binary_erosion(
            data, structure=_SIX_CONNECTED, iterations=-radius, border_value=0
        )

    if c.blob_count > 0:
        rng = substream(c.seed, Purpose.BLOBS)
        grid = _grid(mask.dims)
        for _ in range(c.blob_count):
            center = rng.uniform(0, np.asarray(mask.dims))
            add = rng.random() < 0.5
            blob = _sphere(grid, center, float(c.blob_radius))
            data = data | blob if add else data & ~blob

    if c.flip_rate > 0:
        flips = substream(c.seed, Purpose.FLIPS).random(mask.dims) < c.flip_rate
        data = data ^ flips

    return BinaryMask.from_array(data, spacing=mask.spacing)


# ---------------------------------------------------------------------------
# Features and augmentation
# ---------------------------------------------------------------------------

FEATURE_NAMES = ("intensity", "smoothed", "gradient_magnitude", "local_variance")


def voxel_features(v: Volume) -> list[Volume]:
    """Raw intensity, Gaussian-smoothed intensity, gradient magnitude, local variance."""
    taps = gaussian_kernel().taps
    x = v.data
    smoothed = separable_filter(x, taps)
    grads = [np.gradient(x, axis=a) if x.shape[a] > 1 else np.zeros_like(x) for a in range(3)]
    grad_mag = np.sqrt(sum(g * g for g in grads))
    local_var = np.maximum(separable_filter(x * x, taps) - smoothed**2, 0.0)
    return [v.with_data(c) for c in (x, smoothed, grad_mag, local_var)]


def standardize_features(features: list[Volume]) -> list[Volume]:
    """Zero-mean, unit-variance channels; constant channels become zeros."""
    out = []
    for f in features:
        std = float(f.data.std())
        centered = f.data - f.data.mean()
        out.append(f.with_data(centered / std if std > 0 else np.zeros_like(centered)))
    return out


_AXIS_INDEX = {"x": 0, "y": 1, "z": 2}


def flip_augment(
    v: Volume, mask: BinaryMask, axes: "list[str | int] | tuple[str | int, ...]" = ()
) -> tuple[Volume, BinaryMask]:
    """Mirror a volume and its mask along the given axes."""
    ensure_same_dims(v, mask, "volume and mask")
    index = tuple(sorted({_AXIS_INDEX[a] if isinstance(a, str) else int(a) for a in axes}))
    if not index:
        return v, mask
    return (
        v.with_data(np.flip(v.data, axis=index)),
        BinaryMask.from_array(np.flip(mask.data, axis=index), spacing=mask.spacing),
    )
