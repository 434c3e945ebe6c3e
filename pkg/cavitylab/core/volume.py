"""
CavityLab Volumes

Dense 3D scalar fields and binary masks, the VOL1 on-disk container, and
the small set of voxelwise operations the losses build on.

Conventions:
- Arrays are indexed ``[x, y, z]``; on disk the payload is x-fastest
  (Fortran order), so ``data.ravel(order="F")`` is the file order.
- Storage is 32-bit; every computation runs in 64-bit.
- Fields are immutable: the backing array is marked read-only.
"""

import logging
import struct
from enum import IntEnum
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from cavitylab.core.exceptions import (
    BadMagicError,
    DimensionMismatchError,
    MaskValueError,
    NonFiniteValueError,
    TruncatedPayloadError,
    UnsupportedDTypeError,
    VolumeFormatError,
)

logger = logging.getLogger(__name__)

VOL1_MAGIC = b"VOL1"
# magic, u32 dims x/y/z, f32 spacing x/y/z, u8 dtype
HEADER_STRUCT = struct.Struct("<4s3I3fB")
HEADER_SIZE = HEADER_STRUCT.size  # 29

DEFAULT_LO_PERCENTILE = 0.5
DEFAULT_HI_PERCENTILE = 99.5


class VolumeDType(IntEnum):
    """Payload element type code stored in the VOL1 header."""

    SCALAR = 0  # 32-bit float field
    MASK = 1  # 8-bit binary mask


class VolumeHeader(BaseModel):
    """Geometry and element type shared by every field."""

    model_config = ConfigDict(frozen=True)

    dims: tuple[int, int, int] = Field(..., description="Voxel counts along x, y, z")
    spacing: tuple[float, float, float] = Field(
        default=(1.0, 1.0, 1.0), description="Physical voxel size along x, y, z"
    )
    dtype: VolumeDType = Field(default=VolumeDType.SCALAR, description="Payload type code")

    @field_validator("dims")
    @classmethod
    def dims_must_be_positive(cls, v: tuple[int, int, int]) -> tuple[int, int, int]:
        if any(d < 1 for d in v):
            raise ValueError(f"all dims must be >= 1, got {v}")
        return v

    @field_validator("spacing")
    @classmethod
    def spacing_must_be_positive(cls, v: tuple[float, float, float]) -> tuple[float, float, float]:
        if not all(np.isfinite(s) and s > 0 for s in v):
            raise ValueError(f"all spacing values must be finite and > 0, got {v}")
        return v

    @property
    def voxel_count(self) -> int:
        return int(np.prod(self.dims))


class _Field(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    header: VolumeHeader
    data: np.ndarray

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.header.dims

    @property
    def spacing(self) -> tuple[float, float, float]:
        return self.header.spacing

    @property
    def size(self) -> int:
        return self.header.voxel_count

    def _check_shape(self) -> None:
        if self.data.shape != self.header.dims:
            raise ValueError(
                f"data shape {self.data.shape} does not match header dims {self.header.dims}"
            )


class Volume(_Field):
    """
    A dense 3D scalar field.

    Holds CT intensities (preop, postop), the inverted probability map,
    predictions and residuals.
    """

    @model_validator(mode="after")
    def validate_scalar_field(self) -> "Volume":
        if self.header.dtype != VolumeDType.SCALAR:
            raise ValueError("Volume requires a dtype-0 header")
        data = np.array(self.data, dtype=np.float64, copy=True)
        object.__setattr__(self, "data", data)
        self._check_shape()
        if not np.all(np.isfinite(data)):
            raise NonFiniteValueError("Volume data contains NaN or infinity")
        data.flags.writeable = False
        return self

    @classmethod
    def from_array(
        cls,
        array: np.ndarray,
        spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
    ) -> "Volume":
        """Wrap a 3D array indexed ``[x, y, z]``."""
        array = np.asarray(array, dtype=np.float64)
        if array.ndim != 3:
            raise ValueError(f"expected a 3D array, got shape {array.shape}")
        header = VolumeHeader(dims=array.shape, spacing=spacing, dtype=VolumeDType.SCALAR)
        return cls(header=header, data=array)

    @classmethod
    def full(
        cls,
        dims: tuple[int, int, int],
        value: float,
        spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
    ) -> "Volume":
        return cls.from_array(np.full(dims, value, dtype=np.float64), spacing=spacing)

    def with_data(self, array: np.ndarray) -> "Volume":
        """New volume with this volume's spacing and the given values."""
        return Volume.from_array(array, spacing=self.spacing)


class BinaryMask(_Field):
    """A dense 3D boolean field (ground-truth cavities, weak labels)."""

    @model_validator(mode="after")
    def validate_mask(self) -> "BinaryMask":
        if self.header.dtype != VolumeDType.MASK:
            raise ValueError("BinaryMask requires a dtype-1 header")
        data = np.array(self.data, dtype=bool, copy=True)
        object.__setattr__(self, "data", data)
        self._check_shape()
        data.flags.writeable = False
        return self

    @classmethod
    def from_array(
        cls,
        array: np.ndarray,
        spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
    ) -> "BinaryMask":
        array = np.asarray(array, dtype=bool)
        if array.ndim != 3:
            raise ValueError(f"expected a 3D array, got shape {array.shape}")
        header = VolumeHeader(dims=array.shape, spacing=spacing, dtype=VolumeDType.MASK)
        return cls(header=header, data=array)

    @property
    def count(self) -> int:
        return int(self.data.sum())

    @property
    def is_empty(self) -> bool:
        return not bool(self.data.any())


class VolumeStats(BaseModel):
    """Summary statistics of a scalar field (population variance)."""

    mean: float
    variance: float
    min: float
    max: float


def ensure_same_dims(a: _Field, b: _Field, what: str = "fields") -> None:
    """Raise DimensionMismatchError unless both fields share dims."""
    if a.dims != b.dims:
        raise DimensionMismatchError(f"{what} must share dims: {a.dims} vs {b.dims}")


# ---------------------------------------------------------------------------
# VOL1 codec
# ---------------------------------------------------------------------------


def encode_volume(v: Volume | BinaryMask) -> bytes:
    """Serialize a field to VOL1 bytes."""
    dtype = VolumeDType.MASK if isinstance(v, BinaryMask) else VolumeDType.SCALAR
    header = HEADER_STRUCT.pack(VOL1_MAGIC, *v.dims, *v.spacing, int(dtype))
    flat = v.data.ravel(order="F")
    if dtype == VolumeDType.MASK:
        payload = flat.astype("u1").tobytes()
    else:
        stored = flat.astype("<f4")
        if not np.all(np.isfinite(stored)):
            raise NonFiniteValueError("values overflow 32-bit float storage")
        payload = stored.tobytes()
    return header + payload


def decode_volume(raw: bytes) -> Volume | BinaryMask:
    """Parse VOL1 bytes, raising a distinct error per failure mode."""
    if raw[:4] != VOL1_MAGIC:
        raise BadMagicError(f"bad magic {raw[:4]!r}, expected {VOL1_MAGIC!r}")
    if len(raw) < HEADER_SIZE:
        raise TruncatedPayloadError(f"header truncated: {len(raw)} of {HEADER_SIZE} bytes")

    _, dx, dy, dz, sx, sy, sz, dtype_code = HEADER_STRUCT.unpack_from(raw)
    if dtype_code not in (VolumeDType.SCALAR, VolumeDType.MASK):
        raise UnsupportedDTypeError(f"dtype code {dtype_code} is not 0 or 1")
    try:
        header = VolumeHeader(
            dims=(dx, dy, dz), spacing=(sx, sy, sz), dtype=VolumeDType(dtype_code)
        )
    except ValueError as e:
        raise VolumeFormatError(f"invalid header: {e}") from e

    count = header.voxel_count
    item = 4 if header.dtype == VolumeDType.SCALAR else 1
    payload = raw[HEADER_SIZE:]
    if len(payload) < count * item:
        raise TruncatedPayloadError(
            f"payload truncated: {len(payload) // item} of {count} elements"
        )
    if len(payload) > count * item:
        raise VolumeFormatError(f"{len(payload) - count * item} trailing bytes after payload")

    if header.dtype == VolumeDType.SCALAR:
        values = np.frombuffer(payload, dtype="<f4").astype(np.float64)
        if not np.all(np.isfinite(values)):
            raise NonFiniteValueError("scalar payload contains NaN or infinity")
        return Volume(header=header, data=values.reshape(header.dims, order="F"))

    values = np.frombuffer(payload, dtype="u1")
    if np.any(values > 1):
        raise MaskValueError("mask payload contains bytes other than 0 and 1")
    return BinaryMask(header=header, data=values.reshape(header.dims, order="F").astype(bool))


def load_volume(path: str | Path) -> Volume | BinaryMask:
    """
    Load a VOL1 file.

    Args:
        path: File to read

    Returns:
        Volume for dtype 0, BinaryMask for dtype 1

    Raises:
        VolumeFormatError: One subclass per malformed-file case
    """
    return decode_volume(Path(path).read_bytes())


def save_volume(v: Volume | BinaryMask, path: str | Path) -> None:
    """Write a field as VOL1, replacing any existing file."""
    Path(path).write_bytes(encode_volume(v))


# ---------------------------------------------------------------------------
# Voxelwise operations
# ---------------------------------------------------------------------------


def normalize_intensity(
    v: Volume,
    lo_pct: float = DEFAULT_LO_PERCENTILE,
    hi_pct: float = DEFAULT_HI_PERCENTILE,
) -> Volume:
    """
    Clip to a percentile window and map it affinely onto [0, 1].

    A degenerate window (equal percentile values) yields all zeros.
    """
    if not (0.0 <= lo_pct < hi_pct <= 100.0):
        raise ValueError(f"need 0 <= lo_pct < hi_pct <= 100, got ({lo_pct}, {hi_pct})")

    lo, hi = np.percentile(v.data, [lo_pct, hi_pct])
    if not hi > lo:
        logger.warning(
            "Degenerate normalization window [%g, %g] at percentiles (%g, %g); returning zeros",
            lo,
            hi,
            lo_pct,
            hi_pct,
        )
        return v.with_data(np.zeros(v.dims))

    scaled = (np.clip(v.data, lo, hi) - lo) / (hi - lo)
    return v.with_data(np.clip(scaled, 0.0, 1.0))


def hadamard(a: Volume | BinaryMask, b: Volume | BinaryMask) -> Volume | BinaryMask:
    """Voxelwise product; two masks combine with logical and."""
    ensure_same_dims(a, b, "hadamard operands")
    if isinstance(a, BinaryMask) and isinstance(b, BinaryMask):
        return BinaryMask.from_array(a.data & b.data, spacing=a.spacing)
    return Volume.from_array(
        a.data.astype(np.float64) * b.data.astype(np.float64), spacing=a.spacing
    )


def binarize(v: Volume, threshold: float) -> BinaryMask:
    """True where the value is strictly above the threshold."""
    return BinaryMask.from_array(v.data > threshold, spacing=v.spacing)


def volume_stats(v: Volume) -> VolumeStats:
    data = v.data
    return VolumeStats(
        mean=float(data.mean()),
        variance=float(data.var()),
        min=float(data.min()),
        max=float(data.max()),
    )
