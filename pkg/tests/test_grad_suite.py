"""
Tests for the finite-difference gradient suite.
"""

import numpy as np
import pytest

from autodiff import GradCheckReport, Tensor, precision
from grad_suite import SuiteResult, directional_check, run_gradient_suite


class TestGradientSuite:
    """Tests for the gradient property suite."""

    @pytest.mark.parametrize("name", ["conv3d", "max_pool_odd", "trilinear_down", "channel_softmax",
                                      "feature_recalibration", "attention_distill", "dice_focal"])
    def test_single_case_passes(self, name):
        """Test one operator or module case against finite differences."""
        results = run_gradient_suite(seed=1, only=[name])
        assert [r.name for r in results] == [name]
        assert results[0].report.checked > 0
        assert results[0].passed(1e-4)

    def test_only_filters_cases(self):
        """Test an unknown case name selects nothing."""
        assert run_gradient_suite(only=["no_such_case"]) == []

    def test_precision_restored(self):
        """Test the suite leaves the default precision untouched."""
        run_gradient_suite(only=["relu"])
        assert Tensor([1.0]).data.dtype == np.float32

    def test_directional_check_catches_wrong_gradient(self, rng):
        """Test a direction check fails when the gradient is off by a factor."""
        with precision("f64"):
            p = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
            good = directional_check(lambda: (p * p).sum(), [p], rng)
            bad = directional_check(lambda: (p * p.detach()).sum(), [p], rng)
        assert good.passed(1e-5)
        assert not bad.passed(1e-2)

    @pytest.mark.parametrize("name", ["attention_distill", "attention_distill_p3", "model_airway",
                                      "model_artery-vein"])
    def test_distillation_cases_at_seed_zero(self, name):
        """Test the cases that hold finer attention maps fixed agree without kinks."""
        (result,) = run_gradient_suite(seed=0, only=[name])
        assert result.report.kinks == []
        assert result.report.checked > 0
        assert result.passed(1e-4)

    def test_kinks_fail_a_case(self):
        """Test a case with a reported kink fails even at zero error."""
        result = SuiteResult("relu", GradCheckReport(max_rel_err=0.0, checked=3, kinks=[(0, (1,))]))
        assert not result.passed()

    def test_full_suite_passes(self):
        """Test every operator, module and both model losses."""
        results = run_gradient_suite(seed=0)
        failed = [(r.name, r.report.max_rel_err, len(r.report.kinks)) for r in results if not r.passed(1e-4)]
        assert failed == []
        assert {"model_airway", "model_artery-vein"} <= {r.name for r in results}
