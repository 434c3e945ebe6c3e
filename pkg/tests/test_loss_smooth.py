"""
Tests for CavityLab Smoothness Penalty
"""

import numpy as np
import pytest

from cavitylab.core.gradcheck import smooth_suite
from cavitylab.core.loss_smooth import smooth_loss, smooth_loss_grad, smooth_value_and_grad
from cavitylab.core.volume import Volume


class TestSmoothLoss:
    """Test penalty values."""

    def test_constant_field_is_zero(self):
        """A constant field has zero penalty."""
        assert smooth_loss(Volume.full((4, 5, 6), 0.7)) == 0.0

    def test_raised_corner(self):
        """A single raised corner voxel has one unit difference per axis."""
        data = np.zeros((2, 2, 2))
        data[0, 0, 0] = 1.0
        assert smooth_loss(Volume.from_array(data)) == pytest.approx(3.0)

    def test_single_voxel_volume(self):
        """A single voxel has nothing to compare."""
        assert smooth_loss(Volume.full((1, 1, 1), 0.3)) == 0.0

    def test_step_along_x(self):
        """A unit step costs one per boundary pair."""
        data = np.zeros((2, 2, 2))
        data[1] = 1.0
        assert smooth_loss(Volume.from_array(data)) == pytest.approx(4.0)

    def test_shift_invariant(self, rng):
        """Adding a constant leaves the penalty unchanged."""
        data = rng.normal(size=(4, 4, 4))
        assert smooth_loss(Volume.from_array(data + 3.0)) == pytest.approx(
            smooth_loss(Volume.from_array(data)), rel=1e-12
        )

    def test_alternating_block(self):
        """An alternating block is penalized on every edge."""
        data = np.indices((2, 2, 2)).sum(axis=0) % 2
        assert smooth_loss(Volume.from_array(data.astype(float))) == pytest.approx(12.0)

    def test_ramp(self):
        """A ramp costs its slope per edge."""
        slope = 0.5
        data = slope * np.arange(4, dtype=float).reshape(4, 1, 1) * np.ones((4, 2, 2))
        # 3 differences per line, 4 lines
        assert smooth_loss(Volume.from_array(data)) == pytest.approx(12 * slope**2)

    def test_mean_reduction(self):
        """Mean reduction divides by the edge count."""
        data = np.zeros((2, 2, 2))
        data[0, 0, 0] = 1.0
        assert smooth_loss(Volume.from_array(data), "mean") == pytest.approx(3.0 / 8)

    def test_thin_axes_skipped(self):
        """Axes of length one contribute nothing."""
        data = np.arange(3, dtype=float).reshape(3, 1, 1)
        assert smooth_loss(Volume.from_array(data)) == pytest.approx(2.0)

    def test_unknown_reduction(self):
        """Unknown reductions are rejected."""
        with pytest.raises(ValueError):
            smooth_value_and_grad(np.zeros((2, 2, 2)), "max")


class TestSmoothGrad:
    """Test the analytic gradient."""

    def test_ramp_endpoints(self):
        """Ramp endpoints get one-sided gradients."""
        slope = 0.25
        data = slope * np.arange(5, dtype=float).reshape(5, 1, 1)
        grad = smooth_loss_grad(Volume.from_array(data)).data.ravel()
        assert grad[0] == pytest.approx(-2 * slope)
        assert grad[-1] == pytest.approx(2 * slope)
        np.testing.assert_allclose(grad[1:-1], 0.0, atol=1e-15)

    def test_gradient_sums_to_zero(self, rng):
        """The gradient sums to zero."""
        grad = smooth_loss_grad(Volume.from_array(rng.normal(size=(5, 4, 3))))
        assert grad.data.sum() == pytest.approx(0.0, abs=1e-12)

    def test_quadratic_identity(self, rng):
        """The penalty is quadratic, so <grad, x> = 2 * value."""
        v = Volume.from_array(rng.normal(size=(6, 5, 4)))
        assert np.sum(smooth_loss_grad(v).data * v.data) == pytest.approx(2 * smooth_loss(v))

    def test_gradcheck_suite_passes(self):
        """The smoothness gradcheck suite passes."""
        assert smooth_suite(seeds=3, probes=20).passed
