"""
Tests for CavityLab Volumes

Tests the VOL1 codec (layout, round trips, every malformed-file error),
field validation and the voxelwise operations.
"""

import struct

import numpy as np
import pytest

from cavitylab.core.exceptions import (
    BadMagicError,
    DimensionMismatchError,
    MaskValueError,
    NonFiniteValueError,
    TruncatedPayloadError,
    UnsupportedDTypeError,
    VolumeFormatError,
)
from cavitylab.core.volume import (
    HEADER_SIZE,
    BinaryMask,
    Volume,
    VolumeHeader,
    binarize,
    decode_volume,
    encode_volume,
    hadamard,
    load_volume,
    normalize_intensity,
    save_volume,
    volume_stats,
)


def _header(dims=(2, 2, 2), spacing=(1.0, 1.0, 1.0), dtype=0, magic=b"VOL1"):
    return struct.pack("<4s3I3fB", magic, *dims, *spacing, dtype)


class TestVolumeModel:
    """Test field construction and validation."""

    def test_from_array_sets_header(self):
        """Dims and dtype come from the array."""
        v = Volume.from_array(np.zeros((3, 4, 5)), spacing=(0.5, 1.0, 2.0))
        assert v.dims == (3, 4, 5)
        assert v.spacing == (0.5, 1.0, 2.0)
        assert v.size == 60

    def test_data_is_read_only(self):
        """Volume data is read-only."""
        v = Volume.full((2, 2, 2), 1.0)
        with pytest.raises(ValueError):
            v.data[0, 0, 0] = 5.0

    def test_non_finite_rejected(self):
        """Non-finite values are rejected."""
        data = np.zeros((2, 2, 2))
        data[1, 1, 1] = np.nan
        with pytest.raises(ValueError):
            Volume.from_array(data)

    def test_non_3d_rejected(self):
        """Only 3D arrays are accepted."""
        with pytest.raises(ValueError, match="3D"):
            Volume.from_array(np.zeros((4, 4)))

    def test_header_rejects_bad_geometry(self):
        """Non-positive dims and spacing are rejected."""
        with pytest.raises(ValueError):
            VolumeHeader(dims=(0, 2, 2))
        with pytest.raises(ValueError):
            VolumeHeader(dims=(2, 2, 2), spacing=(1.0, -1.0, 1.0))

    def test_mask_count_and_empty(self, cube_mask):
        """Masks report their voxel count."""
        assert cube_mask.count == 27
        assert not cube_mask.is_empty
        assert BinaryMask.from_array(np.zeros((2, 2, 2))).is_empty


class TestCodec:
    """Test VOL1 encoding and decoding."""

    def test_header_is_29_bytes(self):
        """The header has a fixed size."""
        assert HEADER_SIZE == 29
        raw = encode_volume(Volume.full((2, 3, 4), 0.25))
        assert len(raw) == 29 + 4 * 24

    def test_payload_is_x_fastest(self):
        """The payload is x-fastest."""
        x, y, z = np.meshgrid(np.arange(3), np.arange(2), np.arange(2), indexing="ij")
        v = Volume.from_array(x + 10 * y + 100 * z)
        payload = np.frombuffer(encode_volume(v)[HEADER_SIZE:], dtype="<f4")
        assert payload[:4].tolist() == [0.0, 1.0, 2.0, 10.0]

    def test_scalar_round_trip(self, rng):
        """Scalar volumes round-trip."""
        v = Volume.from_array(rng.normal(size=(4, 5, 6)), spacing=(0.5, 1.0, 2.0))
        back = decode_volume(encode_volume(v))
        assert isinstance(back, Volume)
        assert back.dims == v.dims
        assert back.spacing == v.spacing
        np.testing.assert_array_equal(back.data, v.data.astype(np.float32))

    def test_mask_round_trip(self, cube_mask):
        """Mask volumes round-trip."""
        back = decode_volume(encode_volume(cube_mask))
        assert isinstance(back, BinaryMask)
        np.testing.assert_array_equal(back.data, cube_mask.data)

    def test_file_round_trip(self, tmp_path, cube_mask):
        """Volumes round-trip through a file."""
        path = tmp_path / "mask.vol"
        save_volume(cube_mask, path)
        np.testing.assert_array_equal(load_volume(path).data, cube_mask.data)

    def test_bad_magic(self):
        """A bad magic is rejected."""
        with pytest.raises(BadMagicError):
            decode_volume(_header(magic=b"VOL2") + bytes(32))

    def test_truncated_header(self):
        """A truncated header is rejected."""
        with pytest.raises(TruncatedPayloadError):
            decode_volume(b"VOL1" + bytes(10))

    def test_truncated_payload(self):
        """A truncated payload is rejected."""
        with pytest.raises(TruncatedPayloadError):
            decode_volume(_header() + bytes(4 * 7))

    def test_trailing_bytes(self):
        """Trailing bytes are rejected."""
        with pytest.raises(VolumeFormatError):
            decode_volume(_header() + bytes(4 * 8 + 1))

    def test_unsupported_dtype(self):
        """Unknown dtype codes are rejected."""
        with pytest.raises(UnsupportedDTypeError):
            decode_volume(_header(dtype=2) + bytes(8))

    def test_nan_payload(self):
        """NaN payloads are rejected."""
        payload = np.zeros(8, dtype="<f4")
        payload[3] = np.nan
        with pytest.raises(NonFiniteValueError):
            decode_volume(_header() + payload.tobytes())

    def test_mask_byte_out_of_range(self):
        """Mask bytes must be zero or one."""
        payload = bytes([0, 1, 0, 2, 0, 0, 0, 0])
        with pytest.raises(MaskValueError):
            decode_volume(_header(dtype=1) + payload)

    def test_errors_share_base_class(self):
        """Format errors share a base class."""
        for error in (BadMagicError, TruncatedPayloadError, UnsupportedDTypeError, MaskValueError):
            assert issubclass(error, VolumeFormatError)


class TestNormalizeIntensity:
    """Test percentile normalization."""

    def test_output_in_unit_range(self, rng):
        """Normalized output lies in [0, 1]."""
        v = Volume.from_array(rng.normal(5.0, 3.0, (8, 8, 8)))
        out = normalize_intensity(v).data
        assert out.min() >= 0.0
        assert out.max() <= 1.0
        assert out.min() == 0.0 and out.max() == 1.0

    def test_order_preserved(self, rng):
        """Normalization preserves voxel order."""
        raw = rng.normal(size=(6, 6, 6))
        out = normalize_intensity(Volume.from_array(raw)).data
        order = np.argsort(raw, axis=None)
        assert np.all(np.diff(out.ravel()[order]) >= 0.0)

    def test_constant_gives_zeros(self):
        """A constant volume normalizes to zero."""
        out = normalize_intensity(Volume.full((4, 4, 4), 3.0))
        assert np.all(out.data == 0.0)

    def test_invalid_percentiles(self):
        """Invalid percentiles are rejected."""
        with pytest.raises(ValueError):
            normalize_intensity(Volume.full((2, 2, 2), 1.0), lo_pct=60.0, hi_pct=40.0)


class TestVoxelwiseOps:
    """Test hadamard, binarize and stats."""

    def test_hadamard_product(self):
        """The product is voxelwise."""
        a = Volume.full((2, 2, 2), 2.0)
        b = Volume.full((2, 2, 2), 0.25)
        assert np.all(hadamard(a, b).data == 0.5)

    def test_hadamard_masks_is_logical_and(self, cube_mask):
        """The mask product is logical and."""
        other = BinaryMask.from_array(np.ones((5, 5, 5)))
        out = hadamard(cube_mask, other)
        assert isinstance(out, BinaryMask)
        assert out.count == 27

    def test_hadamard_dims_mismatch(self):
        """Mismatched dims are rejected."""
        with pytest.raises(DimensionMismatchError):
            hadamard(Volume.full((2, 2, 2), 1.0), Volume.full((2, 2, 3), 1.0))

    def test_hadamard_commutative_and_associative(self, rng):
        """The product commutes and associates."""
        a, b, c = (Volume.from_array(rng.uniform(size=(4, 3, 5))) for _ in range(3))
        np.testing.assert_array_equal(hadamard(a, b).data, hadamard(b, a).data)
        np.testing.assert_allclose(
            hadamard(hadamard(a, b), c).data, hadamard(a, hadamard(b, c)).data, atol=1e-12
        )

    def test_hadamard_masks_commutative_and_associative(self, rng):
        """The mask product commutes and associates."""
        a, b, c = (BinaryMask.from_array(rng.random((4, 4, 4)) < 0.5) for _ in range(3))
        np.testing.assert_array_equal(hadamard(a, b).data, hadamard(b, a).data)
        np.testing.assert_array_equal(
            hadamard(hadamard(a, b), c).data, hadamard(a, hadamard(b, c)).data
        )

    def test_binarize_is_strict(self):
        """Binarization is strict at the threshold."""
        v = Volume.from_array(np.array([0.2, 0.5, 0.7]).reshape(3, 1, 1))
        assert binarize(v, 0.5).data.ravel().tolist() == [False, False, True]

    def test_volume_stats(self):
        """Stats summarize the volume."""
        v = Volume.from_array(np.array([1.0, 2.0, 3.0, 4.0]).reshape(4, 1, 1))
        stats = volume_stats(v)
        assert stats.mean == 2.5
        assert stats.variance == pytest.approx(1.25)
        assert (stats.min, stats.max) == (1.0, 4.0)


class TestDocumentedExamples:
    """Worked examples for the volume operations."""

    def test_ramp_file_round_trip(self, tmp_path):
        """A ramp round-trips through a file."""
        ramp = Volume.from_array(np.arange(64, dtype=float).reshape(4, 4, 4))
        save_volume(ramp, tmp_path / "ramp.vol")
        np.testing.assert_array_equal(load_volume(tmp_path / "ramp.vol").data, ramp.data)

    def test_unit_volume_file_size(self, tmp_path):
        """A single voxel file has the expected size."""
        path = tmp_path / "one.vol"
        save_volume(Volume.full((1, 1, 1), 1.0), path)
        assert path.stat().st_size == 29 + 4

    def test_mask_payload_bytes(self):
        """Mask payloads store one byte per voxel."""
        mask = BinaryMask.from_array(np.indices((2, 2, 2)).sum(axis=0) % 2 == 0)
        payload = encode_volume(mask)[HEADER_SIZE:]
        assert len(payload) == 8
        assert set(payload) <= {0, 1}

    def test_overwrite_replaces_content(self, tmp_path):
        """Saving over a file replaces it."""
        path = tmp_path / "v.vol"
        save_volume(Volume.full((4, 4, 4), 1.0), path)
        save_volume(Volume.full((1, 1, 1), 2.0), path)
        assert load_volume(path).dims == (1, 1, 1)

    def test_normalize_affine_map(self):
        """Normalization is an affine map of the input."""
        v = Volume.from_array(np.array([0.0, 50.0, 100.0]).reshape(3, 1, 1))
        out = normalize_intensity(v, lo_pct=0.0, hi_pct=100.0)
        assert out.data.ravel().tolist() == pytest.approx([0.0, 0.5, 1.0])

    def test_normalize_unit_ramp_unchanged(self):
        """A unit ramp is unchanged."""
        ramp = np.linspace(0.0, 1.0, 8).reshape(2, 2, 2)
        out = normalize_intensity(Volume.from_array(ramp), lo_pct=0.0, hi_pct=100.0)
        np.testing.assert_allclose(out.data, ramp)

    def test_hadamard_identity_and_annihilator(self, rng):
        """Ones are the identity and zeros annihilate."""
        x = Volume.from_array(rng.uniform(size=(3, 3, 3)))
        np.testing.assert_array_equal(hadamard(x, Volume.full(x.dims, 1.0)).data, x.data)
        assert np.all(hadamard(x, Volume.full(x.dims, 0.0)).data == 0.0)

    def test_hadamard_pairwise(self):
        """Pairwise products match by hand."""
        a = Volume.from_array(np.array([0.5, 0.8]).reshape(2, 1, 1))
        b = Volume.from_array(np.array([1.0, 0.0]).reshape(2, 1, 1))
        assert hadamard(a, b).data.ravel().tolist() == [0.5, 0.0]

    def test_binarize_boundaries(self, rng):
        """Boundary values binarize as expected."""
        v = Volume.from_array(rng.uniform(size=(4, 4, 4)))
        assert binarize(v, 1.0).is_empty
        assert binarize(v, -1.0).count == 64
        pair = Volume.from_array(np.array([0.4, 0.6]).reshape(2, 1, 1))
        assert binarize(pair, 0.5).data.ravel().tolist() == [False, True]

    def test_stats_examples(self):
        """Stats match worked examples."""
        stats = volume_stats(Volume.full((2, 2, 2), 0.3))
        assert (stats.mean, stats.variance, stats.min, stats.max) == pytest.approx((0.3, 0.0, 0.3, 0.3))
        two = volume_stats(Volume.from_array(np.array([0.0, 1.0]).reshape(2, 1, 1)))
        assert (two.mean, two.variance) == (0.5, 0.25)
        assert volume_stats(Volume.from_array(np.arange(8.0).reshape(2, 2, 2))).mean == 3.5
