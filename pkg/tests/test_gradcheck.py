"""
Tests for CavityLab Gradient Checks
"""

import numpy as np
import pytest

from cavitylab.core.gradcheck import (
    GradcheckReport,
    GradcheckRow,
    max_relative_error,
    run_gradcheck,
    smooth_suite,
)


class TestMaxRelativeError:
    """Test the finite-difference checker."""

    def test_exact_gradient(self, rng):
        """An exact gradient has negligible error."""
        x = rng.normal(size=(3, 3, 3))
        err = max_relative_error(lambda v: float(np.sum(v**3)), x, 3.0 * x**2, rng, probes=10)
        assert err <= 1e-6

    def test_wrong_gradient_detected(self, rng):
        """A scaled gradient is flagged."""
        x = rng.normal(size=(3, 3, 3))
        err = max_relative_error(lambda v: float(np.sum(v**2)), x, 3.0 * x, rng, probes=10)
        assert err > 0.1

    def test_probes_capped_by_size(self, rng):
        """Probe count never exceeds the parameter count."""
        x = np.array([1.0, 2.0])
        assert max_relative_error(lambda v: float(v @ v), x, 2.0 * x, rng, probes=50) <= 1e-8


class TestReport:
    """Test pass/fail aggregation."""

    def test_failures_listed(self):
        """Failed suites are listed on the report."""
        ok = GradcheckRow(suite="a", max_rel_error=1e-7, tolerance=1e-6, probes=1)
        bad = GradcheckRow(suite="b", max_rel_error=1e-3, tolerance=1e-6, probes=1)
        report = GradcheckReport(rows=[ok, bad])
        assert not report.passed
        assert report.failures == [bad]

    def test_smooth_suite(self):
        """The smoothness suite passes."""
        assert smooth_suite(seeds=2, probes=10).passed

    @pytest.mark.slow
    def test_every_suite_passes(self):
        """Every registered suite passes."""
        report = run_gradcheck(seeds=2, probes=8)
        assert report.passed, report.failures
        assert len(report.rows) == 3 + 1 + 4 + 5
