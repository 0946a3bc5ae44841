"""Tests for the interpolation identity, Slepian comparison and concentration."""

import math

import numpy as np
import pytest

from src.core.exceptions import InvalidCorrelation, NotPsd
from src.models.functionals import coordinate_max, coordinate_min, linear, product_pair, smoothed_max
from src.models.schemas import InterpolationResult
from src.services.gaussian_service import RngStream


class TestInterpolation:
    def test_product_pair_closed_form(self, comparison_service):
        rho = 0.5
        k_m = np.array([[1.0, rho], [rho, 1.0]])
        result = comparison_service.interpolation_residual(
            k_m, np.eye(2), product_pair(), 20_000, RngStream(seed=1), nodes=8
        )
        assert result.rhs == pytest.approx(rho)
        assert result.rhs_refined == pytest.approx(rho)
        assert result.lhs == pytest.approx(rho, abs=0.05)
        assert result.verdict
        assert result.refinement_verdict

    def test_equal_covariations_have_zero_rhs(self, comparison_service):
        k = np.array([[1.0, 0.3], [0.3, 2.0]])
        result = comparison_service.interpolation_residual(k, k, smoothed_max(), 5000, RngStream(seed=2), nodes=4)
        assert result.rhs == 0.0
        assert result.verdict

    def test_smoothed_max_on_random_pair(self, comparison_service):
        k_m, k_n = comparison_service.random_psd_pair(3, RngStream(seed=3))
        result = comparison_service.interpolation_residual(k_m, k_n, smoothed_max(), 20_000, RngStream(seed=4))
        assert result.verdict, result
        assert abs(result.rhs_refined - result.rhs) <= 5 * result.stderr
        assert result.refinement_stderr > 0.0
        assert result.refinement_verdict, result

    def test_refinement_verdict_flags_unstable_quadrature(self):
        stable = InterpolationResult(
            function="f", lhs=0.5, rhs=0.5, stderr=0.01, rhs_refined=0.52, refinement_stderr=0.01
        )
        unstable = stable.model_copy(update={"rhs_refined": 0.6})
        assert stable.refinement_verdict
        assert not unstable.refinement_verdict
        assert InterpolationResult(function="f", lhs=0.0, rhs=0.0, stderr=0.0).refinement_verdict

    def test_rejects_indefinite_matrix(self, comparison_service):
        bad = np.array([[1.0, 2.0], [2.0, 1.0]])
        with pytest.raises(NotPsd):
            comparison_service.interpolation_residual(bad, np.eye(2), product_pair(), 10, RngStream(seed=0))

    def test_rejects_mismatched_sizes(self, comparison_service):
        with pytest.raises(NotPsd):
            comparison_service.interpolation_residual(np.eye(2), np.eye(3), smoothed_max(), 10, RngStream(seed=0))

    def test_needs_second_derivatives(self, comparison_service):
        with pytest.raises(ValueError):
            comparison_service.interpolation_residual(np.eye(2), np.eye(2), coordinate_max(), 10, RngStream(seed=0))

    def test_suite_shape(self, comparison_service):
        results = comparison_service.interpolation_suite(3, 4, 2000, RngStream(seed=5))
        assert len(results) == 4
        assert results[0].function == "x1*x2"
        assert all(r.function.startswith("smoothed_max") for r in results[1:])


class TestSlepian:
    def test_two_dimensional_closed_form(self, comparison_service):
        report = comparison_service.slepian_check(0.0, 0.0, 2, 400_000, RngStream(seed=6))
        assert report.closed_form_n == pytest.approx(math.sqrt(1 / math.pi))
        assert report.e_max_n == pytest.approx(report.closed_form_n, rel=0.01)

    def test_equal_correlations_agree(self, comparison_service):
        report = comparison_service.slepian_check(0.5, 0.5, 8, 20_000, RngStream(seed=7))
        spread = 3 * (report.stderr_m + report.stderr_n)
        assert abs(report.e_max_m - report.e_max_n) <= spread
        assert report.verdict

    def test_fully_correlated_max_is_centered(self, comparison_service):
        report = comparison_service.slepian_check(1.0, 0.0, 4, 20_000, RngStream(seed=8))
        assert abs(report.e_max_m) <= 3 * report.stderr_m
        assert report.e_max_m < report.e_max_n
        assert report.verdict

    def test_negative_correlation(self, comparison_service):
        report = comparison_service.slepian_check(0.0, -0.2, 4, 20_000, RngStream(seed=9))
        assert report.e_max_n > report.e_max_m
        assert report.verdict

    @pytest.mark.parametrize("rho", [0.0, 0.5, -0.5])
    def test_closed_form_check(self, comparison_service, rho):
        estimate, stderr, exact = comparison_service.closed_form_check(rho, 400_000, RngStream(seed=17))
        assert exact == pytest.approx(math.sqrt((1 - rho) / math.pi))
        assert abs(estimate - exact) <= 0.01 * exact
        assert stderr < 0.003

    def test_closed_form_rejects_bad_rho(self, comparison_service):
        with pytest.raises(InvalidCorrelation):
            comparison_service.closed_form_check(1.5, 10, RngStream(seed=0))

    @pytest.mark.parametrize("rho_m,rho_n,dim", [(0.2, 0.5, 2), (0.5, -0.5, 3), (1.2, 0.0, 2), (0.5, 0.0, 1)])
    def test_invalid_correlations(self, comparison_service, rho_m, rho_n, dim):
        with pytest.raises(InvalidCorrelation):
            comparison_service.slepian_check(rho_m, rho_n, dim, 100, RngStream(seed=0))

    def test_sweep_holds_everywhere(self, comparison_service):
        reports = comparison_service.slepian_sweep([0.0, 0.5, 0.9], [2, 8], 10_000, RngStream(seed=10))
        assert len(reports) == 12
        assert all(r.rho_n <= r.rho_m for r in reports)
        assert all(r.verdict for r in reports)


class TestConcentration:
    def test_coordinate_max_bounds(self, comparison_service):
        report = comparison_service.concentration_check(10, [0.5, 1.0, 2.0], [0.5, 1.0, 2.0], 50_000, RngStream(seed=11))
        assert report.passed
        assert report.e_f == pytest.approx(1.54, abs=0.02)

    def test_linear_function_meets_the_bound(self, comparison_service):
        report = comparison_service.concentration_check(1, [0.5, 1.0], [1.0], 200_000, RngStream(seed=12))
        for empirical, bound, err in zip(report.empirical_log_mgf, report.mgf_bound, report.log_mgf_stderr):
            assert abs(empirical - bound) <= 3 * err + 1e-3
        assert report.passed

    def test_zero_lambda(self, comparison_service):
        report = comparison_service.concentration_check(4, [0.0], [0.0], 1000, RngStream(seed=13))
        assert report.empirical_log_mgf == [0.0]
        assert report.mgf_bound == [0.0]
        assert report.tail_bound == [1.0]


class TestSubmodularity:
    def test_max_is_submodular(self, comparison_service):
        assert comparison_service.submodularity_check(coordinate_max(), 5000, RngStream(seed=14))

    def test_min_is_not(self, comparison_service):
        assert not comparison_service.submodularity_check(coordinate_min(), 5000, RngStream(seed=15))

    def test_linear_is_modular(self, comparison_service):
        f = linear(np.arange(1.0, 5.0))
        assert comparison_service.submodularity_check(f, 5000, RngStream(seed=16))
