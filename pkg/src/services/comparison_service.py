"""
Comparison Service - Gaussian Comparison and Concentration Checks

Monte Carlo verification of the interpolation identity, the Slepian-type
comparison of expected maxima, Gaussian concentration of Lipschitz
functionals and the lattice form of submodularity.
"""

from typing import List, Optional, Sequence, Tuple
import logging
import math

import numpy as np

from src.core.config import settings
from src.core.exceptions import InvalidCorrelation, NotPsd
from src.models.functionals import TestFunction, coordinate_max, product_pair, smoothed_max
from src.models.schemas import ComparisonReport, ConcentrationReport, InterpolationResult
from src.services.gaussian_service import GaussianService, PsdFactor, RngStream

logger = logging.getLogger(__name__)

# Slepian draws use lanes 0 and 1; interpolation draws start here
INTERPOLATION_LANE = 1000


def _stderr(samples: np.ndarray) -> float:
    if samples.size < 2:
        return 0.0
    return float(np.std(samples, ddof=1) / math.sqrt(samples.size))


class ComparisonService:
    """Service for the comparison and concentration experiments"""

    def __init__(
        self,
        gaussian_service: GaussianService,
        sigmas: float = settings.verdict_sigmas,
        quadrature_nodes: int = settings.quadrature_nodes,
    ):
        self.gaussian = gaussian_service
        self.sigmas = sigmas
        self.quadrature_nodes = quadrature_nodes

    def _check_psd(self, matrix: np.ndarray, name: str) -> np.ndarray:
        a = np.asarray(matrix, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1] or not np.allclose(a, a.T, atol=1e-12):
            raise NotPsd(f"{name} is not a symmetric square matrix")
        smallest = float(np.min(np.linalg.eigvalsh(a)))
        if smallest < -1e-10 * max(1.0, float(np.max(np.abs(a)))):
            raise NotPsd(f"{name} has eigenvalue {smallest:g}")
        return a

    def interpolation_residual(
        self,
        k_m: np.ndarray,
        k_n: np.ndarray,
        f: TestFunction,
        replicas: int,
        rng: RngStream,
        nodes: Optional[int] = None,
    ) -> InterpolationResult:
        """
        Both sides of the interpolation identity for constant covariations.

        LHS = E f(M(1)) - E f(N(1)); RHS = 1/2 int_0^1 sum_ij
        E d_ij f(M(t) + N(1) - N(t)) (K_M - K_N)_ij dt by the midpoint rule,
        with M(t) and N(1) - N(t) drawn as independent Gaussians of
        covariance t K_M and (1 - t) K_N.

        Args:
            k_m, k_n: Symmetric PSD covariation matrices of the same size
            f: Test function with a Hessian
            replicas: Samples for the LHS and per quadrature node
            rng: Stream descriptor; sub-streams are keyed by its replica field
            nodes: Midpoint nodes (defaults to settings)

        Returns:
            InterpolationResult carrying a 2x-node refinement of the RHS,
            drawn from disjoint streams so the two estimates are independent
        """
        if not f.is_smooth:
            raise ValueError(f"{f.name} has no second derivatives")
        k_m = self._check_psd(k_m, "K_M")
        k_n = self._check_psd(k_n, "K_N")
        if k_m.shape != k_n.shape:
            raise NotPsd(f"K_M {k_m.shape} and K_N {k_n.shape} differ in size")
        nodes = nodes or self.quadrature_nodes

        factor_m = self.gaussian.factor_psd(k_m)
        factor_n = self.gaussian.factor_psd(k_n)
        values_m = f(self.gaussian.sample_batch(factor_m, 1.0, rng.for_replica(0), replicas))
        values_n = f(self.gaussian.sample_batch(factor_n, 1.0, rng.for_replica(1), replicas))
        lhs = float(np.mean(values_m) - np.mean(values_n))
        lhs_var = _stderr(values_m) ** 2 + _stderr(values_n) ** 2

        rhs, rhs_var = self._rhs(factor_m, factor_n, k_m - k_n, f, nodes, replicas, rng, offset=2)
        refined, refined_var = self._rhs(
            factor_m, factor_n, k_m - k_n, f, 2 * nodes, max(2, replicas // 2), rng, offset=2 + 2 * nodes
        )
        return InterpolationResult(
            function=f.name,
            lhs=lhs,
            rhs=rhs,
            stderr=math.sqrt(lhs_var + rhs_var),
            rhs_refined=refined,
            refinement_stderr=math.sqrt(rhs_var + refined_var),
            sigmas=self.sigmas,
        )

    def _rhs(
        self,
        factor_m: PsdFactor,
        factor_n: PsdFactor,
        diff: np.ndarray,
        f: TestFunction,
        nodes: int,
        replicas: int,
        rng: RngStream,
        offset: int,
    ) -> Tuple[float, float]:
        means = np.empty(nodes)
        variances = np.empty(nodes)
        for i in range(nodes):
            t = (i + 0.5) / nodes
            head = self.gaussian.sample_batch(factor_m, math.sqrt(t), rng.for_replica(offset + 2 * i), replicas)
            tail = self.gaussian.sample_batch(
                factor_n, math.sqrt(1.0 - t), rng.for_replica(offset + 2 * i + 1), replicas
            )
            contraction = np.einsum("nij,ij->n", f.hessian(head + tail), diff)
            means[i] = np.mean(contraction)
            variances[i] = _stderr(contraction) ** 2
        return 0.5 * float(np.mean(means)), 0.25 * float(np.sum(variances)) / nodes ** 2

    def random_psd_pair(self, dim: int, rng: RngStream) -> Tuple[np.ndarray, np.ndarray]:
        """Two random positive definite matrices G G^T / dim"""
        g = rng.standard_normals((2, dim, dim))
        return g[0] @ g[0].T / dim, g[1] @ g[1].T / dim

    def interpolation_suite(
        self, pairs: int, dim: int, replicas: int, rng: RngStream, rho: float = 0.5
    ) -> List[InterpolationResult]:
        """The product case with its closed form, then smoothed max on random pairs"""
        k_m = np.array([[1.0, rho], [rho, 1.0]])
        results = [
            self.interpolation_residual(k_m, np.eye(2), product_pair(), replicas, rng.for_lane(INTERPOLATION_LANE))
        ]
        f = smoothed_max()
        for j in range(pairs):
            size = 2 + j % (dim - 1)
            a, b = self.random_psd_pair(size, rng.for_lane(INTERPOLATION_LANE + 1).at(j))
            stream = rng.for_lane(INTERPOLATION_LANE + 2 + j)
            results.append(self.interpolation_residual(a, b, f, replicas, stream))
            logger.debug(f"Interpolation pair {j} (dim {size}): lhs {results[-1].lhs:.4f} rhs {results[-1].rhs:.4f}")
        return results

    def _equicorrelated_max(self, rho: float, dim: int, replicas: int, rng: RngStream) -> np.ndarray:
        maxima = []
        if rho >= 0.0:
            for block in self.gaussian.normal_batches(rng, replicas, dim + 1):
                x = math.sqrt(rho) * block[:, :1] + math.sqrt(1.0 - rho) * block[:, 1:]
                maxima.append(np.max(x, axis=1))
        else:
            cov = np.full((dim, dim), rho) + (1.0 - rho) * np.eye(dim)
            lower = self.gaussian.factor_psd(cov).lower_factor
            for block in self.gaussian.normal_batches(rng, replicas, dim):
                maxima.append(np.max(block @ lower.T, axis=1))
        return np.concatenate(maxima)

    def slepian_check(
        self, rho_m: float, rho_n: float, dim: int, replicas: int, rng: RngStream
    ) -> ComparisonReport:
        """
        Compare E max of equicorrelated standard Gaussian vectors.

        M (correlation rho_m) has smaller increment distances than N
        (correlation rho_n <= rho_m), so E max M <= E max N.

        Args:
            rho_m, rho_n: Correlations with -1/(dim-1) < rho_n <= rho_m <= 1
            dim: Vector dimension, at least 2
            replicas: Samples per vector
            rng: Stream descriptor

        Returns:
            ComparisonReport
        """
        if dim < 2:
            raise InvalidCorrelation(f"dim must be at least 2, got {dim}")
        floor = -1.0 / (dim - 1)
        if not (floor < rho_n <= rho_m <= 1.0):
            raise InvalidCorrelation(
                f"need {floor:g} < rho_n <= rho_m <= 1, got rho_n={rho_n}, rho_m={rho_m}"
            )

        max_m = self._equicorrelated_max(rho_m, dim, replicas, rng.for_lane(0))
        max_n = self._equicorrelated_max(rho_n, dim, replicas, rng.for_lane(1))
        report = ComparisonReport(
            dim=dim,
            rho_m=rho_m,
            rho_n=rho_n,
            e_max_m=float(np.mean(max_m)),
            e_max_n=float(np.mean(max_n)),
            stderr_m=_stderr(max_m),
            stderr_n=_stderr(max_n),
            closed_form_n=math.sqrt((1.0 - rho_n) / math.pi) if dim == 2 else None,
            sigmas=self.sigmas,
        )
        logger.debug(
            f"Slepian dim={dim} rho_m={rho_m} rho_n={rho_n}: "
            f"{report.e_max_m:.4f} vs {report.e_max_n:.4f} -> {report.verdict}"
        )
        return report

    def closed_form_check(self, rho: float, replicas: int, rng: RngStream) -> Tuple[float, float, float]:
        """E max of a correlated standard pair: (estimate, stderr, sqrt((1 - rho) / pi))"""
        if not -1.0 < rho <= 1.0:
            raise InvalidCorrelation(f"need -1 < rho <= 1, got {rho}")
        maxima = self._equicorrelated_max(rho, 2, replicas, rng)
        return float(np.mean(maxima)), _stderr(maxima), math.sqrt((1.0 - rho) / math.pi)

    def slepian_sweep(
        self, rho_grid: Sequence[float], dims: Sequence[int], replicas: int, rng: RngStream
    ) -> List[ComparisonReport]:
        """slepian_check over every admissible pair rho_m >= rho_n of the grid"""
        reports = []
        for d_index, dim in enumerate(dims):
            for i, rho_m in enumerate(rho_grid):
                for j, rho_n in enumerate(rho_grid):
                    if rho_n > rho_m or rho_n <= -1.0 / (dim - 1):
                        continue
                    key = (d_index * len(rho_grid) + i) * len(rho_grid) + j
                    reports.append(self.slepian_check(rho_m, rho_n, dim, replicas, rng.for_replica(key)))
        logger.info(f"Slepian sweep: {sum(r.verdict for r in reports)}/{len(reports)} verdicts hold")
        return reports

    def concentration_check(
        self,
        dim: int,
        lambda_grid: Sequence[float],
        c_grid: Sequence[float],
        replicas: int,
        rng: RngStream,
    ) -> ConcentrationReport:
        """
        Exponential-moment and tail bounds for f = coordinate max of N(0, I_dim).

        f is 1-Lipschitz. The log-MGF bound is lambda E f + lambda^2 L^2 / 2 and
        the tail bound exp(-C^2 / 2 L^2); a Chernoff bound built from the
        empirical log-MGF over lambda_grid is reported alongside.

        Args:
            dim: Dimension (dim = 1 gives the linear function f(x) = x)
            lambda_grid: Exponents, non-negative
            c_grid: Tail levels, non-negative
            replicas: Samples
            rng: Stream descriptor

        Returns:
            ConcentrationReport
        """
        if dim < 1:
            raise ValueError("dim must be positive")
        f = coordinate_max()
        lipschitz = f.lipschitz
        values = np.concatenate([f(block) for block in self.gaussian.normal_batches(rng, replicas, dim)])
        e_f = float(np.mean(values))
        centered = values - e_f
        n = values.size

        log_mgf, log_mgf_err, mgf_bound, mgf_ok = [], [], [], []
        centered_log_mgf = []
        for lam in lambda_grid:
            weights = np.exp(lam * centered)
            mean_w = float(np.mean(weights))
            empirical = lam * e_f + math.log(mean_w)
            err = float(np.std(weights, ddof=1) / math.sqrt(n) / mean_w) if n > 1 else 0.0
            bound = lam * e_f + lam * lam * lipschitz ** 2 / 2.0
            log_mgf.append(empirical)
            log_mgf_err.append(err)
            mgf_bound.append(bound)
            mgf_ok.append(empirical <= bound + self.sigmas * err)
            centered_log_mgf.append(math.log(mean_w))

        tail, tail_err, tail_bound, chernoff, tail_ok = [], [], [], [], []
        for c in c_grid:
            p = float(np.mean(centered >= c))
            err = math.sqrt(p * (1.0 - p) / n)
            bound = math.exp(-c * c / (2.0 * lipschitz ** 2))
            best = min(
                (math.exp(-lam * c + psi) for lam, psi in zip(lambda_grid, centered_log_mgf)),
                default=1.0,
            )
            tail.append(p)
            tail_err.append(err)
            tail_bound.append(bound)
            chernoff.append(best)
            tail_ok.append(p <= bound + self.sigmas * err and p <= best + self.sigmas * err)

        report = ConcentrationReport(
            dim=dim,
            lipschitz=lipschitz,
            e_f=e_f,
            lambda_grid=list(lambda_grid),
            c_grid=list(c_grid),
            empirical_log_mgf=log_mgf,
            log_mgf_stderr=log_mgf_err,
            mgf_bound=mgf_bound,
            empirical_tail=tail,
            tail_stderr=tail_err,
            tail_bound=tail_bound,
            chernoff_bound=chernoff,
            mgf_verdicts=mgf_ok,
            tail_verdicts=tail_ok,
        )
        logger.info(f"Concentration dim={dim}: E f = {e_f:.4f}, passed={report.passed}")
        return report

    @staticmethod
    def submodularity_check(f: TestFunction, samples: int, rng: RngStream, dim: int = 4) -> bool:
        """
        Check f(x ^ y) + f(x v y) <= f(x) + f(y) on random Gaussian pairs.

        Args:
            f: Function of a dim-dimensional point
            samples: Number of (x, y) pairs
            rng: Stream descriptor
            dim: Dimension of the points

        Returns:
            True when no sampled pair violates the inequality
        """
        pairs = rng.standard_normals((2, samples, dim))
        x, y = pairs[0], pairs[1]
        lhs = f(np.minimum(x, y)) + f(np.maximum(x, y))
        rhs = f(x) + f(y)
        violations = int(np.sum(lhs > rhs + 1e-12))
        if violations:
            logger.info(f"{f.name}: {violations}/{samples} pairs violate submodularity")
        return violations == 0
