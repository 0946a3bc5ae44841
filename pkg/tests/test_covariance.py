"""Tests for covariation functions and the integral criteria."""

import math

import numpy as np
import pytest
from pydantic import ValidationError

from src.core.exceptions import NonMonotone
from src.models.schemas import CovarianceModel, IntegralStatus, IntegralVerdict
from src.services.covariance_service import CovarianceService


class TestEvaluate:
    def test_arratia_is_indicator_of_zero(self, covariance_service, arratia):
        assert covariance_service.evaluate(arratia, 0.0) == 1.0
        assert covariance_service.evaluate(arratia, 1e-300) == 0.0
        assert covariance_service.evaluate(arratia, -2.0) == 0.0

    def test_gaussian_values(self, covariance_service, gaussian_phi):
        assert covariance_service.evaluate(gaussian_phi, 0.0) == 1.0
        assert covariance_service.evaluate(gaussian_phi, 0.5) == pytest.approx(math.exp(-0.25))

    def test_exp_alpha_values(self, covariance_service):
        model = CovarianceModel(family="exp_alpha", alpha=0.5)
        assert covariance_service.evaluate(model, 4.0) == pytest.approx(math.exp(-2.0))

    @pytest.mark.parametrize("family,alpha", [("arratia", None), ("gaussian", None), ("exp_alpha", 1.5)])
    def test_even_and_strictly_below_one_off_zero(self, covariance_service, family, alpha):
        model = CovarianceModel(family=family, alpha=alpha)
        xs = np.linspace(0.01, 5.0, 200)
        values = covariance_service.evaluate(model, xs)
        np.testing.assert_array_equal(values, covariance_service.evaluate(model, -xs))
        assert np.all(np.abs(values) < 1.0)

    def test_one_minus_keeps_precision_near_zero(self, covariance_service, gaussian_phi):
        assert covariance_service.one_minus(gaussian_phi, 1e-10) == pytest.approx(1e-20, rel=1e-9)


class TestModelValidation:
    def test_alpha_outside_range_is_rejected(self):
        with pytest.raises(ValidationError, match=r"\(0, 2\]"):
            CovarianceModel(family="exp_alpha", alpha=3.0)

    def test_alpha_required_for_exp_alpha(self):
        with pytest.raises(ValidationError):
            CovarianceModel(family="exp_alpha")

    def test_alpha_forbidden_elsewhere(self):
        with pytest.raises(ValidationError):
            CovarianceModel(family="gaussian", alpha=1.0)

    def test_integral_verdict_value_only_when_convergent(self):
        with pytest.raises(ValidationError):
            IntegralVerdict(status=IntegralStatus.DIVERGENT, value=1.0)
        with pytest.raises(ValidationError):
            IntegralVerdict(status=IntegralStatus.CONVERGENT)


class TestGram:
    def test_arratia_gram_is_identity(self, covariance_service, arratia):
        np.testing.assert_array_equal(covariance_service.gram(arratia, [0.0, 1.0]), np.eye(2))

    def test_gaussian_gram(self, covariance_service, gaussian_phi):
        g = covariance_service.gram(gaussian_phi, [0.0, 0.5])
        expected = math.exp(-0.25)
        np.testing.assert_allclose(g, [[1.0, expected], [expected, 1.0]])

    def test_single_point(self, covariance_service, exp_alpha_one):
        np.testing.assert_array_equal(covariance_service.gram(exp_alpha_one, [0.3]), [[1.0]])

    def test_symmetric_with_unit_diagonal(self, covariance_service, exp_alpha_one):
        points = np.sort(np.random.default_rng(1).uniform(0, 1, 30))
        g = covariance_service.gram(exp_alpha_one, points)
        np.testing.assert_array_equal(g, g.T)
        np.testing.assert_array_equal(np.diag(g), np.ones(30))
        assert np.min(np.linalg.eigvalsh(g)) > 0


class TestLevelSetMeasure:
    def test_gaussian_closed_form(self, covariance_service, gaussian_phi):
        for u in (1e-6, 0.01, 0.2, 0.4):
            expected = min(2.0 * math.sqrt(-math.log1p(-u * u)), 1.0)
            assert covariance_service.level_set_measure(gaussian_phi, u) == pytest.approx(expected, rel=1e-9)

    def test_clipped_at_one(self, covariance_service, gaussian_phi):
        assert covariance_service.level_set_measure(gaussian_phi, 0.9) == 1.0

    def test_arratia_level_set_is_null(self, covariance_service, arratia):
        assert covariance_service.level_set_measure(arratia, 0.5) == 0.0


class TestDudleyIntegral:
    def test_arratia_diverges(self, covariance_service, arratia):
        verdict = covariance_service.dudley_integral(arratia, 1e-4)
        assert verdict.status is IntegralStatus.DIVERGENT
        assert verdict.value is None

    @pytest.mark.parametrize("family,alpha", [("gaussian", None), ("exp_alpha", 1.0)])
    def test_continuous_families_converge_stably(self, covariance_service, family, alpha):
        model = CovarianceModel(family=family, alpha=alpha)
        coarse = covariance_service.dudley_integral(model, 1e-4)
        fine = covariance_service.dudley_integral(model, 1e-5)
        assert coarse.status is IntegralStatus.CONVERGENT
        assert fine.status is IntegralStatus.CONVERGENT
        assert coarse.value > 0
        assert abs(coarse.value - fine.value) <= 1e-3

    def test_non_monotone_phi_is_rejected(self, covariance_service, gaussian_phi, monkeypatch):
        monkeypatch.setattr(
            CovarianceService, "evaluate", staticmethod(lambda model, x: np.cos(6.0 * np.asarray(x)))
        )
        with pytest.raises(NonMonotone):
            covariance_service.dudley_integral(gaussian_phi, 1e-4)

    def test_tol_must_be_positive(self, covariance_service, gaussian_phi):
        with pytest.raises(ValueError):
            covariance_service.dudley_integral(gaussian_phi, 0.0)


class TestCoalescenceCriterion:
    def test_exp_alpha_one_is_coalescing(self, covariance_service, exp_alpha_one):
        verdict = covariance_service.coalescence_criterion(exp_alpha_one, 0.5, 1e-4)
        assert verdict.status is IntegralStatus.CONVERGENT

    def test_gaussian_is_continuous(self, covariance_service, gaussian_phi):
        verdict = covariance_service.coalescence_criterion(gaussian_phi, 0.5, 1e-4)
        assert verdict.status is IntegralStatus.DIVERGENT

    def test_arratia_value(self, covariance_service, arratia):
        verdict = covariance_service.coalescence_criterion(arratia, 0.5, 1e-6)
        assert verdict.status is IntegralStatus.CONVERGENT
        assert verdict.value == pytest.approx(0.125, abs=1e-6)

    def test_status_stable_under_tighter_tol(self, covariance_service, exp_alpha_one, gaussian_phi):
        for model in (exp_alpha_one, gaussian_phi):
            coarse = covariance_service.coalescence_criterion(model, 0.5, 1e-4)
            fine = covariance_service.coalescence_criterion(model, 0.5, 1e-5)
            assert coarse.status is fine.status

    @pytest.mark.parametrize("eps", [0.0, 1.5])
    def test_eps_range(self, covariance_service, gaussian_phi, eps):
        with pytest.raises(ValueError):
            covariance_service.coalescence_criterion(gaussian_phi, eps, 1e-4)
