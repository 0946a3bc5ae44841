"""
Covariance Service - Covariation Functions and Integral Criteria

Evaluates the built-in covariation functions phi, builds Gram matrices and
decides the Dudley continuity criterion and the coalescence criterion by
dyadic-shell quadrature.
"""

from typing import Callable, List, Sequence, Tuple, Union
import logging

import numpy as np
from scipy.integrate import quad
from scipy.optimize import bisect

from src.core.config import settings
from src.core.exceptions import NonMonotone, QuadratureFailure
from src.models.schemas import (
    CovarianceFamily,
    CovarianceModel,
    IntegralStatus,
    IntegralVerdict,
)

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]


class CovarianceService:
    """Service for covariation functions and their integral criteria"""

    def __init__(
        self,
        bisect_tol: float = settings.bisect_tol,
        min_shells: int = settings.min_shells,
        max_shells: int = settings.max_shells,
        geometric_ratio: float = settings.geometric_ratio,
        monotone_samples: int = settings.monotone_samples,
    ):
        self.bisect_tol = bisect_tol
        self.min_shells = min_shells
        self.max_shells = max_shells
        self.geometric_ratio = geometric_ratio
        self.monotone_samples = monotone_samples

    @staticmethod
    def evaluate(model: CovarianceModel, x: ArrayLike) -> ArrayLike:
        """
        Evaluate phi(x).

        Args:
            model: Covariation model
            x: Scalar or array of separations

        Returns:
            phi(x) with the same shape as x
        """
        ax = np.abs(np.asarray(x, dtype=float))
        if model.family is CovarianceFamily.ARRATIA:
            out = np.where(ax == 0.0, 1.0, 0.0)
        elif model.family is CovarianceFamily.EXP_ALPHA:
            out = np.exp(-(ax ** model.alpha))
        else:
            out = np.exp(-ax * ax)
        return float(out) if np.ndim(out) == 0 else out

    @staticmethod
    def one_minus(model: CovarianceModel, x: ArrayLike) -> ArrayLike:
        """1 - phi(x) without cancellation near x = 0"""
        ax = np.abs(np.asarray(x, dtype=float))
        if model.family is CovarianceFamily.ARRATIA:
            out = np.where(ax == 0.0, 0.0, 1.0)
        elif model.family is CovarianceFamily.EXP_ALPHA:
            out = -np.expm1(-(ax ** model.alpha))
        else:
            out = -np.expm1(-ax * ax)
        return float(out) if np.ndim(out) == 0 else out

    def gram(self, model: CovarianceModel, points: Sequence[float]) -> np.ndarray:
        """
        Build the Gram matrix G[i, j] = phi(points[i] - points[j]).

        Args:
            model: Covariation model
            points: Finite, non-empty sequence of positions

        Returns:
            Symmetric matrix with unit diagonal
        """
        p = np.asarray(points, dtype=float).ravel()
        return self.cross_gram(model, p, p)

    def cross_gram(self, model: CovarianceModel, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        """Rectangular block phi(rows[i] - cols[j])"""
        diff = np.subtract.outer(np.asarray(rows, dtype=float), np.asarray(cols, dtype=float))
        return np.asarray(self.evaluate(model, diff), dtype=float).reshape(diff.shape)

    def check_monotone(self, model: CovarianceModel, upper: float) -> None:
        """Raise NonMonotone unless phi is non-increasing on [0, upper]"""
        xs = np.linspace(0.0, upper, self.monotone_samples)
        values = np.asarray(self.evaluate(model, xs))
        if np.any(np.diff(values) > 1e-15):
            raise NonMonotone(f"{model.label()} is not non-increasing on [0, {upper:g}]")

    def level_set_measure(self, model: CovarianceModel, u: float) -> float:
        """
        Lebesgue measure of {x in [0, 1] : phi(x) >= 1 - u^2}.

        Computed as 2 x*(u) clipped to 1, where x*(u) solves
        1 - phi(x) = u^2 by bisection on [0, 1/2].
        """
        level = u * u
        if level >= 1.0 or self.one_minus(model, 0.5) <= level:
            return 1.0
        if model.family is CovarianceFamily.ARRATIA:
            return 0.0

        def excess(x: float) -> float:
            return self.one_minus(model, x) - level

        root = bisect(excess, 0.0, 0.5, xtol=1e-300, rtol=self.bisect_tol, maxiter=2000)
        return min(2.0 * root, 1.0)

    def dudley_integral(self, model: CovarianceModel, tol: float) -> IntegralVerdict:
        """
        Decide convergence of the Dudley integral of the tangent process.

        Integrates |ln m(u)|^(1/2) over u in (0, 1], m(u) being the level-set
        measure from level_set_measure.

        Args:
            model: Covariation model, non-increasing on [0, 1]
            tol: Absolute tolerance of the value

        Returns:
            IntegralVerdict
        """
        if tol <= 0:
            raise ValueError("tol must be positive")
        self.check_monotone(model, 1.0)

        def integrand(u: float) -> float:
            measure = self.level_set_measure(model, u)
            if measure <= 0.0:
                return np.inf
            return float(np.sqrt(abs(np.log(measure))))

        verdict = self._shell_integral(integrand, 1.0, tol)
        logger.info(f"Dudley integral for {model.label()}: {verdict.status.value} value={verdict.value}")
        return verdict

    def coalescence_criterion(self, model: CovarianceModel, eps: float, tol: float) -> IntegralVerdict:
        """
        Decide finiteness of the integral of x / (1 - phi(x)) over (0, eps].

        A convergent integral means the flow coalesces; a divergent one means
        the flow is continuous.

        Args:
            model: Covariation model, non-increasing on [0, eps]
            eps: Upper limit in (0, 1]
            tol: Absolute tolerance of the value

        Returns:
            IntegralVerdict
        """
        if not 0.0 < eps <= 1.0:
            raise ValueError(f"eps must lie in (0, 1], got {eps}")
        if tol <= 0:
            raise ValueError("tol must be positive")
        self.check_monotone(model, eps)

        def integrand(x: float) -> float:
            gap = self.one_minus(model, x)
            if gap <= 0.0:
                return np.inf
            return x / gap

        verdict = self._shell_integral(integrand, eps, tol)
        logger.info(
            f"Coalescence criterion for {model.label()} on (0, {eps:g}]: "
            f"{verdict.status.value} value={verdict.value}"
        )
        return verdict

    def _shell_integral(
        self, integrand: Callable[[float], float], upper: float, tol: float
    ) -> IntegralVerdict:
        """
        Integrate over dyadic shells [upper 2^-(k+1), upper 2^-k] toward 0.

        Declares divergence when a shell is infinite or when, after
        min_shells shells, contributions stop shrinking geometrically.
        """
        contributions: List[float] = []
        total = 0.0
        error = 0.0
        shell_tol = tol / (4.0 * self.max_shells)

        for k in range(self.max_shells):
            lo, hi = upper * 2.0 ** (-(k + 1)), upper * 2.0 ** (-k)
            mid = 0.5 * (lo + hi)
            if not np.isfinite(integrand(mid)):
                logger.debug(f"Shell {k} has an infinite integrand")
                return IntegralVerdict(status=IntegralStatus.DIVERGENT, abs_error=error, shells=k + 1)

            value, abserr = self._quad_shell(integrand, lo, hi, shell_tol)
            contributions.append(value)
            total += value
            error += abserr

            if k + 1 < self.min_shells:
                continue

            geometric, ratio = self._geometric_tail(contributions)
            if not geometric:
                logger.debug(f"Shell contributions stalled at ratio {ratio:.3f} after {k + 1} shells")
                return IntegralVerdict(status=IntegralStatus.DIVERGENT, abs_error=error, shells=k + 1)

            tail = contributions[-1] * ratio / (1.0 - ratio)
            if tail <= tol / 2.0:
                return IntegralVerdict(
                    status=IntegralStatus.CONVERGENT,
                    value=total + tail,
                    abs_error=error + tail,
                    shells=k + 1,
                )

        raise QuadratureFailure(f"tail above tol={tol:g} after {self.max_shells} shells")

    def _geometric_tail(self, contributions: List[float], window: int = 5) -> Tuple[bool, float]:
        """Largest ratio of successive contributions over the last window shells"""
        recent = contributions[-(window + 1):]
        if all(c == 0.0 for c in recent):
            return True, 0.0
        ratios = [b / a if a > 0 else np.inf for a, b in zip(recent, recent[1:])]
        ratio = max(ratios)
        return ratio < self.geometric_ratio, ratio

    @staticmethod
    def _quad_shell(
        integrand: Callable[[float], float], lo: float, hi: float, tol: float
    ) -> Tuple[float, float]:
        try:
            value, abserr = quad(integrand, lo, hi, epsabs=tol, epsrel=1e-10, limit=200)
        except Exception as e:
            logger.error(f"Quadrature failed on [{lo:g}, {hi:g}]: {e}")
            raise QuadratureFailure(str(e)) from e

        if not np.isfinite(value) or abserr > max(tol, 1e-10 * abs(value)) * 100:
            raise QuadratureFailure(f"shell [{lo:g}, {hi:g}] stalled with error {abserr:g}")
        return float(value), float(abserr)
