"""
Tests for CavityLab Robust Losses

Tests the Student-t NLL in both modes, its gradients, the softplus
parameterization and the baseline losses.
"""

import math

import numpy as np
import pytest

from cavitylab.core.exceptions import DimensionMismatchError, UnknownLossError
from cavitylab.core.gradcheck import baseline_suite, tdist_suite
from cavitylab.core.loss_tdist import (
    BASELINE_KINDS,
    LossKind,
    Residual,
    TDistMode,
    TDistParams,
    baseline_loss,
    baseline_loss_grad,
    softplus,
    softplus_inverse,
    tdist_grad,
    tdist_nll,
)
from cavitylab.core.volume import BinaryMask, Volume


def _residual(values) -> Residual:
    return Residual(values=Volume.from_array(np.asarray(values, dtype=float).reshape(-1, 1, 1)))


class TestParameterization:
    """Test the softplus mapping of r and sigma^2."""

    def test_softplus_inverse_round_trip(self):
        """Softplus inverse recovers its input."""
        y = np.array([1e-3, 0.5, 1.0, 30.0])
        np.testing.assert_allclose(softplus(softplus_inverse(y)), y, rtol=1e-12)

    def test_softplus_no_overflow(self):
        """Softplus stays finite for large inputs."""
        assert softplus(1000.0) == pytest.approx(1000.0)
        assert softplus(-1000.0) >= 0.0

    def test_from_values(self):
        """Params built from values reproduce them."""
        p = TDistParams.from_values(r=3.0, sigma2=0.25)
        assert p.r == pytest.approx(3.0, rel=1e-12)
        assert p.sigma2 == pytest.approx(0.25, rel=1e-12)
        assert p.shared_scale

    def test_per_voxel_scale_field(self):
        """A scale field is stored per voxel."""
        p = TDistParams.from_values(r=2.0, sigma2=np.full((2, 2, 2), 0.5))
        assert not p.shared_scale
        np.testing.assert_allclose(p.sigma2, 0.5)

    def test_any_raw_value_is_admissible(self):
        """Every raw value maps to valid params."""
        p = TDistParams(rho_r=-50.0, s=-50.0)
        assert p.r > 0.0
        assert p.sigma2 > 0.0

    def test_non_positive_values_rejected(self):
        """Non-positive values are rejected."""
        with pytest.raises(ValueError):
            TDistParams.from_values(r=0.0, sigma2=1.0)

    def test_non_finite_raw_rejected(self):
        """Non-finite raw params are rejected."""
        with pytest.raises(ValueError):
            TDistParams(rho_r=float("nan"), s=0.0)


class TestTDistNll:
    """Test NLL values."""

    def test_zero_residual_unit_params(self):
        """Zero residual with unit params gives the closed form."""
        p = TDistParams.from_values(1.0, 1.0)
        assert tdist_nll(_residual(np.zeros(8)), p) == pytest.approx(math.log(math.pi), abs=1e-6)

    def test_unit_residual(self):
        """A unit residual matches the closed form."""
        p = TDistParams.from_values(1.0, 1.0)
        expected = math.log(math.pi) + math.log(2.0)
        assert tdist_nll(_residual([1.0]), p) == pytest.approx(expected, abs=1e-6)

    def test_gaussian_limit(self):
        """Large degrees of freedom approach the Gaussian loss."""
        p = TDistParams.from_values(1e6, 1.0)
        expected = 0.5 * math.log(2.0 * math.pi)
        assert tdist_nll(_residual(np.zeros(4)), p) == pytest.approx(expected, abs=1e-3)

    def test_joint_single_voxel_equals_per_voxel(self):
        """A single-voxel field matches the scalar scale."""
        res = _residual([0.7])
        per_voxel = TDistParams.from_values(2.5, 0.4)
        joint = TDistParams.from_values(2.5, 0.4, mode=TDistMode.JOINT)
        assert tdist_nll(res, joint) == pytest.approx(tdist_nll(res, per_voxel), rel=1e-12)

    def test_grows_with_residual(self):
        """Loss grows with the residual."""
        p = TDistParams.from_values(3.0, 1.0)
        values = [tdist_nll(_residual([d]), p) for d in (0.0, 0.5, 1.0, 5.0)]
        assert values == sorted(values)

    def test_scale_field_dims_checked(self):
        """Scale field dims must match."""
        p = TDistParams.from_values(1.0, np.ones((2, 2, 2)))
        with pytest.raises(DimensionMismatchError):
            tdist_nll(_residual(np.zeros(8)), p)

    def test_residual_from_prediction(self):
        """Residuals come from prediction minus label."""
        label = BinaryMask.from_array(np.array([True, False]).reshape(2, 1, 1))
        pred = Volume.from_array(np.array([0.8, 0.3]).reshape(2, 1, 1))
        res = Residual.from_prediction(label, pred)
        assert res.values.data.ravel().tolist() == pytest.approx([0.2, -0.3])


class TestTDistGrad:
    """Test analytic gradients."""

    def test_zero_residual_has_zero_gradient(self):
        """Zero residual has zero prediction gradient."""
        grad = tdist_grad(_residual(np.zeros(6)), TDistParams.from_values(2.0, 1.0))
        assert np.all(grad.d_res.data == 0.0)

    def test_influence_redescends(self):
        """Influence falls off for large residuals."""
        p = TDistParams.from_values(1.0, 1.0)
        far = tdist_grad(_residual([1e6]), p).d_res.data.item()
        near = tdist_grad(_residual([10.0]), p).d_res.data.item()
        assert abs(far) < abs(near)

    def test_field_gradient_has_field_shape(self):
        """The scale gradient has the field's shape."""
        p = TDistParams.from_values(1.0, np.ones((3, 1, 1)))
        grad = tdist_grad(_residual([0.1, 0.2, 0.3]), p)
        assert np.shape(grad.d_s) == (3, 1, 1)

    @pytest.mark.parametrize("mode", list(TDistMode))
    @pytest.mark.parametrize("per_voxel_scale", [False, True])
    def test_finite_differences(self, mode, per_voxel_scale):
        """Analytic gradients match finite differences."""
        row = tdist_suite(mode, per_voxel_scale, seeds=3, probes=10)
        assert row.passed, row


class TestBaselines:
    """Test CE, BCE, Focal, MSE and MAE."""

    @pytest.fixture
    def label(self):
        return BinaryMask.from_array(np.array([True, False, True, False]).reshape(4, 1, 1))

    def test_mse_zero_at_label(self, label):
        """MSE is zero at the label."""
        pred = Volume.from_array(label.data.astype(float))
        assert baseline_loss("MSE", pred, label) == 0.0
        assert baseline_loss("MAE", pred, label) == 0.0

    def test_bce_at_half_is_log_two(self, label):
        """BCE at one half is log two."""
        pred = Volume.full(label.dims, 0.5)
        assert baseline_loss("BCE", pred, label) == pytest.approx(math.log(2.0))
        assert baseline_loss("CE", pred, label) == pytest.approx(math.log(2.0))

    def test_focal_without_focusing_is_bce(self, label, rng):
        """Focal with gamma zero equals BCE."""
        pred = Volume.from_array(rng.uniform(0.05, 0.95, label.dims))
        focal = baseline_loss(LossKind.FOCAL, pred, label, focal_gamma=0.0)
        assert focal == pytest.approx(baseline_loss(LossKind.BCE, pred, label), rel=1e-12)

    def test_mse_gradient(self, label, rng):
        """MSE gradient is twice the residual."""
        pred = Volume.from_array(rng.uniform(size=label.dims))
        grad = baseline_loss_grad("MSE", pred, label).data
        expected = 2.0 * (pred.data - label.data) / label.size
        np.testing.assert_allclose(grad, expected)

    def test_bce_finite_at_saturated_prediction(self, label):
        """BCE stays finite at saturated predictions."""
        pred = Volume.from_array(label.data.astype(float))
        assert math.isfinite(baseline_loss("BCE", pred, label))
        assert np.all(np.isfinite(baseline_loss_grad("BCE", pred, label).data))

    def test_unknown_kind(self, label):
        """Unknown baselines are rejected."""
        with pytest.raises(UnknownLossError):
            baseline_loss("Hinge", Volume.full(label.dims, 0.5), label)

    def test_td_is_not_a_baseline(self, label):
        """TD is not served as a baseline loss."""
        with pytest.raises(UnknownLossError):
            baseline_loss("TD", Volume.full(label.dims, 0.5), label)

    @pytest.mark.parametrize("kind", BASELINE_KINDS)
    def test_finite_differences(self, kind):
        """Analytic gradients match finite differences."""
        row = baseline_suite(kind, seeds=3, probes=10)
        assert row.passed, row
