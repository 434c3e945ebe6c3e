"""
Tests for CavityLab Multi-scale Similarity Loss
"""

import numpy as np
import pytest

from cavitylab.core.exceptions import DimensionMismatchError
from cavitylab.core.gradcheck import max_relative_error, similarity_suite
from cavitylab.core.loss_msssim import (
    SimilarityObjective,
    SimilarityVariant,
    SsimParams,
    msssim_cscc_grad,
    msssim_cscc_loss,
    scc,
    ssim_components,
)
from cavitylab.core.phantom import PhantomSpec, generate_phantom
from cavitylab.core.volume import Volume, normalize_intensity

NARROW = dict(window_radius=2, window_sigma=1.0)


class TestSsimParams:
    """Test loss constants."""

    def test_defaults(self):
        """Default settings use five scales."""
        p = SsimParams()
        assert p.M == 5
        assert p.c3 == pytest.approx(p.C2 / 2)
        assert sum(p.beta) == pytest.approx(1.0)
        assert p.variant == SimilarityVariant.CSCC

    def test_exponents_renormalized(self):
        """Scale exponents sum to one."""
        p = SsimParams(M=2, beta=(1.0, 3.0), gamma=(2.0, 2.0))
        assert p.beta == pytest.approx((0.25, 0.75))
        assert p.gamma == pytest.approx((0.5, 0.5))

    def test_exponent_count_must_match_scales(self):
        """Exponent count must match the scale count."""
        with pytest.raises(ValueError):
            SsimParams(M=3)

    def test_fewer_achieved_scales_renormalize(self):
        """Small volumes renormalize over the scales achieved."""
        alpha, beta, gamma = SsimParams().scale_exponents(2)
        assert beta.sum() == pytest.approx(1.0)
        assert alpha == pytest.approx(beta[-1])
        assert beta[0] == pytest.approx(0.0448 / (0.0448 + 0.2856))

    def test_unknown_key_rejected(self):
        """Unknown settings are rejected."""
        with pytest.raises(ValueError):
            SsimParams(windw_radius=3)


class TestScc:
    """Test the squared global correlation."""

    def test_affine_copy_is_one(self, textured_pair):
        """A positive affine copy is maximally similar."""
        x, _ = textured_pair
        assert scc(x, x.with_data(2.0 * x.data + 1.0)) == pytest.approx(1.0)

    def test_anticorrelated_is_one(self, textured_pair):
        """A negated copy also scores one."""
        x, _ = textured_pair
        assert scc(x, x.with_data(-x.data)) == pytest.approx(1.0)

    def test_constant_field_is_zero(self, textured_pair):
        """Constant fields carry no structure."""
        x, _ = textured_pair
        assert scc(x, Volume.full(x.dims, 0.5)) == 0.0


class TestSimilarityLoss:
    """Test loss values and gradients."""

    def test_self_similarity_is_minus_one(self):
        """A scan against itself scores -1."""
        for seed in range(5):
            pair = generate_phantom(PhantomSpec(dims=(24, 24, 24), seed=seed))
            x = normalize_intensity(pair.preop)
            value = msssim_cscc_loss(x, x)
            assert value.loss == pytest.approx(-1.0, abs=1e-6)

    def test_plain_variant_self_similarity_is_zero(self, textured_pair):
        """The plain variant scores zero against itself."""
        x, _ = textured_pair
        p = SsimParams(variant=SimilarityVariant.MSSSIM)
        assert msssim_cscc_loss(x, x, p).loss == pytest.approx(0.0, abs=1e-6)

    def test_range_and_symmetry(self, textured_pair):
        """The loss is bounded and symmetric."""
        x, y = textured_pair
        for variant in SimilarityVariant:
            p = SsimParams(variant=variant)
            forward = msssim_cscc_loss(x, y, p).loss
            backward = msssim_cscc_loss(y, x, p).loss
            assert -1.0 <= forward <= 1.0
            assert forward == pytest.approx(backward, abs=1e-12)

    def test_dissimilar_pair_scores_worse(self, textured_pair, rng):
        """Unrelated volumes score worse than similar ones."""
        x, y = textured_pair
        noise = x.with_data(rng.uniform(0.0, 1.0, x.dims))
        assert msssim_cscc_loss(x, y).loss < msssim_cscc_loss(x, noise).loss

    def test_achieved_scales_reported(self, textured_pair):
        """The number of scales used is reported."""
        x, y = textured_pair
        assert msssim_cscc_loss(x, y).achieved_M == 1
        assert msssim_cscc_loss(x, y, SsimParams(**NARROW)).achieved_M == 2

    def test_dims_mismatch(self, textured_pair):
        """Mismatched dims are rejected."""
        x, _ = textured_pair
        with pytest.raises(DimensionMismatchError):
            msssim_cscc_loss(x, Volume.full((16, 16, 15), 0.5))

    def test_gradient_matches_finite_differences(self, textured_pair, rng):
        """Analytic gradient matches finite differences."""
        x, y = textured_pair
        p = SsimParams(M=2, beta=(0.5, 0.5), gamma=(0.5, 0.5), **NARROW)
        grad = msssim_cscc_grad(x, y, p)
        objective = SimilarityObjective(y.data, p)
        err = max_relative_error(
            lambda v: objective.value_and_grad(v, need_grad=False)[0], x.data, grad.data, rng, 15
        )
        assert err <= 1e-5

    @pytest.mark.parametrize("variant", list(SimilarityVariant))
    def test_gradcheck_suite_passes(self, variant):
        """The similarity gradcheck suite passes."""
        row = similarity_suite(variant, seeds=2, probes=10)
        assert row.passed, row

    def test_gradient_is_local(self, rng):
        """A local edit only moves the gradient within two window radii of it."""
        y = rng.uniform(0.2, 0.8, (24, 24, 24))
        x = y.copy()
        x[4:8, 4:8, 4:8] += 0.1
        p = SsimParams(M=1, beta=(1.0,), gamma=(1.0,), variant=SimilarityVariant.MSSSIM, **NARROW)
        _, grad = SimilarityObjective(y, p).value_and_grad(x)
        assert np.abs(grad[4:8, 4:8, 4:8]).max() > 1e-8
        assert np.abs(grad[16:, :, :]).max() < 1e-12


class TestSsimComponents:
    """Test the per-voxel maps."""

    def test_identical_inputs_give_unit_maps(self, textured_pair):
        """Identical inputs give unit similarity maps."""
        x, _ = textured_pair
        maps = ssim_components(x, x, SsimParams(**NARROW))
        np.testing.assert_allclose(maps.l_map.data, 1.0, atol=1e-9)
        np.testing.assert_allclose(maps.c_map.data, 1.0, atol=1e-9)
        np.testing.assert_allclose(maps.s_map.data, 1.0, atol=1e-6)

    def test_maps_bounded(self, textured_pair):
        """Similarity maps stay within their bounds."""
        x, y = textured_pair
        maps = ssim_components(x, y)
        assert maps.l_map.data.max() <= 1.0 + 1e-12
        assert maps.c_map.data.max() <= 1.0 + 1e-12
        assert np.abs(maps.s_map.data).max() <= 1.0 + 1e-9


class TestDocumentedExamples:
    """Worked examples for the similarity terms."""

    def test_shifted_means_only_affect_luminance(self, textured_pair):
        """A mean shift changes only the luminance term."""
        x, _ = textured_pair
        maps = ssim_components(x, x.with_data(x.data + 0.5), SsimParams(**NARROW))
        np.testing.assert_allclose(maps.c_map.data, 1.0, atol=1e-9)
        np.testing.assert_allclose(maps.s_map.data, 1.0, atol=1e-6)
        assert maps.l_map.data.max() < 1.0

    def test_equal_constants_give_unit_maps(self):
        """Equal constant fields give unit maps."""
        c = Volume.full((8, 8, 8), 0.4)
        maps = ssim_components(c, c, SsimParams(**NARROW))
        for m in (maps.l_map, maps.c_map, maps.s_map):
            np.testing.assert_allclose(m.data, 1.0, atol=1e-9)

    def test_uncorrelated_sequences(self):
        """Uncorrelated fields give near-zero structure."""
        x = Volume.from_array(np.array([1.0, 0.0, -1.0, 0.0]).reshape(4, 1, 1))
        y = Volume.from_array(np.array([0.0, 1.0, 0.0, -1.0]).reshape(4, 1, 1))
        assert scc(x, y) == pytest.approx(0.0, abs=1e-15)

    def test_masked_preop_with_unit_delta(self, small_pair):
        """A unit delta keeps the whole pre-op scan."""
        rho = normalize_intensity(small_pair.preop)
        x = rho.with_data(rho.data * np.ones(rho.dims))
        assert msssim_cscc_loss(x, rho).loss == pytest.approx(-1.0, abs=1e-6)

    def test_noise_increases_loss(self, small_pair, rng):
        """Added noise raises the loss."""
        x = normalize_intensity(small_pair.preop)
        noisy = x.with_data(x.data + rng.uniform(-0.1, 0.1, x.dims))
        assert msssim_cscc_loss(x, x).loss < msssim_cscc_loss(x, noisy).loss

    def test_gradient_vanishes_at_self_similarity(self):
        """The gradient vanishes at self-similarity."""
        pair = generate_phantom(PhantomSpec(dims=(24, 24, 24), seed=2))
        x = normalize_intensity(pair.preop)
        assert np.abs(msssim_cscc_grad(x, x).data).max() <= 1e-6
