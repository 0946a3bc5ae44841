"""
Analysis Service - Short-Time Statistics of Flows

Computes sup deviations, the tangent-process mean E(t), law of iterated
logarithm ratio series, coupling gaps and cluster counts, and turns series
into tolerance-band verdicts.
"""

from functools import lru_cache
from typing import List, Optional, Tuple
import logging
import math

import numpy as np
from scipy.integrate import quad
from scipy.stats import norm

from src.core.config import settings
from src.core.exceptions import ConfigInvalid
from src.models.schemas import (
    AnalysisParams,
    CovarianceFamily,
    CovarianceModel,
    DeviationSeries,
    FlowPathRecord,
    GridKind,
    SimConfig,
    Verdict,
)
from src.services.flow_service import FlowService, log_grid, make_grid
from src.services.gaussian_service import RngStream

logger = logging.getLogger(__name__)

# RngStream lanes for tangent-marginal estimates; the level index is added
E_LANE = 100
RESCALED_LANE = 200


def sup_deviation(record: FlowPathRecord, t: float) -> float:
    """max over labels of |X(u_k, t) - u_k|"""
    i = record.time_index(t)
    return float(np.max(np.abs(record.values[i] - record.initial)))


def running_sup_deviation(record: FlowPathRecord, t: float) -> float:
    """max over recorded s <= t of sup_deviation(record, s)"""
    i = record.time_index(t)
    return float(np.max(np.abs(record.values[: i + 1] - record.initial[None, :])))


def coupling_gap(x: FlowPathRecord, y: FlowPathRecord, t: float) -> float:
    """max over labels of |X(u_k, t) - Y(u_k, t)|"""
    i = x.time_index(t)
    return float(np.max(np.abs(x.values[i] - y.values[i])))


def cluster_count_series(record: FlowPathRecord) -> List[Tuple[float, int]]:
    """Cluster counts at the recorded times"""
    return [(float(t), int(c)) for t, c in zip(record.times, record.cluster_counts)]


def norm_tlogt(t: float) -> float:
    return math.sqrt(t * math.log(1.0 / t))


def norm_tloglogt(t: float) -> float:
    """sqrt(2 t lnln 1/t), defined for t < 1/e"""
    if t >= math.exp(-1.0):
        raise ConfigInvalid(f"lnln(1/t) needs t < 1/e, got {t}")
    return math.sqrt(2.0 * t * math.log(math.log(1.0 / t)))


@lru_cache(maxsize=1024)
def iid_abs_max_mean(n: int) -> float:
    """
    E max of n iid |N(0, 1)| by quadrature of the survival function.

    Upper-bounds the Arratia flow sup on n grid points at unit time scale and
    equals the Arratia tangent E(t) / sqrt(t).
    """
    if n < 1:
        raise ValueError("n must be positive")

    def survival(x: float) -> float:
        # 1 - (1 - 2 Q(x))^n without cancellation
        return -math.expm1(n * math.log1p(-2.0 * norm.sf(x)))

    value, _ = quad(survival, 0.0, np.inf, epsabs=1e-12, epsrel=1e-10, limit=200)
    return float(value)


def _stderr(samples: np.ndarray) -> float:
    if samples.size < 2:
        return 0.0
    return float(np.std(samples, ddof=1) / math.sqrt(samples.size))


def _inversions(values: List[float]) -> int:
    return sum(1 for a, b in zip(values, values[1:]) if b > a)


def at_most(t: float, limit: float) -> bool:
    """t <= limit up to rounding, so that 0.1 ** 3 counts as 1e-3"""
    return t <= limit * (1.0 + 1e-9)


def structure_summary(records: List[FlowPathRecord]) -> Tuple[float, int]:
    """Smallest neighbouring-label gap and the number of cluster-count increases"""
    worst_gap = 0.0
    increases = 0
    for record in records:
        if record.values.shape[1] > 1:
            worst_gap = min(worst_gap, float(np.min(np.diff(record.values, axis=1))))
        increases += int(np.sum(np.diff(record.cluster_counts) > 0))
    return worst_gap, increases


def _structure_verdicts(worst_gap: float, increases: int, detail: str = "") -> List[Verdict]:
    return [
        Verdict(name="monotone_in_label", passed=worst_gap >= 0.0, observed=worst_gap, bound=0.0, detail=detail),
        Verdict(
            name="cluster_counts_non_increasing",
            passed=increases == 0,
            observed=float(increases),
            bound=0.0,
            detail=detail,
        ),
    ]


class AnalysisService:
    """Service for flow statistics along geometric time sequences"""

    def __init__(self, flow_service: FlowService, sigmas: float = settings.verdict_sigmas):
        self.flow = flow_service
        self.sigmas = sigmas
        logger.info("Analysis service initialized")

    def estimate_E(
        self, config: SimConfig, t: float, replicas: int, lane: int = E_LANE
    ) -> Tuple[float, float]:
        """
        Monte Carlo estimate of E(t) = E sup_k |Y(k sqrt(t), t) - k sqrt(t)|.

        Args:
            config: Supplies phi and seed; the grid is the sqrt grid at t
            t: Time in (0, 1]
            replicas: Number of tangent samples

        Returns:
            (mean, stderr)
        """
        points = make_grid(t)
        rng = RngStream(seed=config.seed, lane=lane)
        draws = self.flow.sample_tangent_marginal(config.phi, points, t, rng, replicas)
        sups = np.max(np.abs(draws), axis=1)
        return float(np.mean(sups)), _stderr(sups)

    @staticmethod
    def rescaled_grid(t: float) -> Tuple[np.ndarray, int]:
        """Points 2 ceil(sqrt(ln 1/t)) k sqrt(t) and the block count N"""
        blocks = 2 * math.ceil(math.sqrt(math.log(1.0 / t)))
        return blocks * make_grid(t), blocks

    def estimate_rescaled_sup(
        self, config: SimConfig, t: float, replicas: int, lane: int = RESCALED_LANE
    ) -> Tuple[float, float, int]:
        """Mean tangent sup over the rescaled grid, its stderr and N"""
        points, blocks = self.rescaled_grid(t)
        rng = RngStream(seed=config.seed, lane=lane)
        draws = self.flow.sample_tangent_marginal(config.phi, points, t, rng, replicas)
        sups = np.max(np.abs(draws), axis=1)
        return float(np.mean(sups)), _stderr(sups), blocks

    @staticmethod
    def subgaussian_max_bound(e_s: float, t: float, n_blocks: int) -> float:
        """E max of n_blocks sub-Gaussian copies: e_s + sqrt(2 t ln N)"""
        if e_s < 0 or t <= 0 or n_blocks < 1:
            raise ValueError("need e_s >= 0, t > 0 and n_blocks >= 1")
        return e_s + math.sqrt(2.0 * t * math.log(n_blocks))

    def _levels(self, q: float, n_min: int, n_max: int) -> List[int]:
        if not 0.0 < q < 1.0:
            raise ConfigInvalid(f"q must lie in (0, 1), got {q}")
        levels = list(range(n_min, n_max + 1))
        if not levels:
            raise ConfigInvalid(f"empty level range [{n_min}, {n_max}]")
        if q ** n_min >= math.exp(-1.0):
            raise ConfigInvalid(f"t = q^{n_min} = {q ** n_min:g} is not below 1/e")
        return levels

    def _level_config(self, config: SimConfig, t: float, level: int) -> SimConfig:
        update = {
            "t_target": t,
            "dt": config.dt * t / config.t_target,
            "checkpoints": (),
        }
        if config.grid is GridKind.LOG:
            update["log_level"] = level
        # validation of the source config guarantees the copy is consistent
        return config.model_copy(update=update)

    def _level_records(self, config: SimConfig, level: int, replicas: int) -> List[FlowPathRecord]:
        try:
            return self.flow.run_replicas(lambda r: self.flow.simulate(config, r), range(replicas))
        except Exception as e:
            logger.error(f"{config.phi.label()} level n={level} failed: {e}")
            raise

    def lil_series(
        self,
        config: SimConfig,
        q: float,
        n_min: int,
        n_max: int,
        replicas: Optional[int] = None,
        e_replicas: int = 4000,
    ) -> DeviationSeries:
        """
        Sup deviations at t_n = q^n on the sqrt grid, with their normalizations.

        Args:
            config: Base configuration; t and dt are rescaled per level so the
                step count stays fixed
            q: Ratio of the geometric sequence
            n_min, n_max: Level range, all levels below 1/e
            replicas: Flow replicas per level (defaults to config.replicas)
            e_replicas: Tangent samples behind each E(t_n)

        Returns:
            DeviationSeries
        """
        levels = self._levels(q, n_min, n_max)
        replicas = replicas or config.replicas
        rows = {key: [] for key in (
            "t", "mean", "median", "stderr", "running", "e", "e_err", "c_mean", "c_iqr", "gap", "inc"
        )}

        for level in levels:
            t = q ** level
            level_config = self._level_config(config, t, level).model_copy(update={"grid": GridKind.SQRT})
            records = self._level_records(level_config, level, replicas)
            worst_gap, increases = structure_summary(records)

            sups = np.array([sup_deviation(rec, t) for rec in records])
            running = np.array([running_sup_deviation(rec, t) for rec in records])
            e_mean, e_err = self.estimate_E(config, t, e_replicas, lane=E_LANE + level)
            centered = (sups - e_mean) / norm_tloglogt(t)
            q1, q3 = np.percentile(centered, [25, 75])

            rows["t"].append(t)
            rows["mean"].append(float(np.mean(sups)))
            rows["median"].append(float(np.median(sups)))
            rows["stderr"].append(_stderr(sups))
            rows["running"].append(float(np.mean(running)))
            rows["e"].append(e_mean)
            rows["e_err"].append(e_err)
            rows["c_mean"].append(float(np.mean(centered)))
            rows["c_iqr"].append(float(q3 - q1))
            rows["gap"].append(worst_gap)
            rows["inc"].append(increases)
            logger.info(
                f"LIL n={level} t={t:.3e}: mean sup {rows['mean'][-1]:.4e}, "
                f"ratio {rows['mean'][-1] / norm_tlogt(t):.3f}, E(t) {e_mean:.4e}"
            )

        t_values = rows["t"]
        return DeviationSeries(
            kind="lil",
            q=q,
            levels=levels,
            t_values=t_values,
            mean=rows["mean"],
            median=rows["median"],
            stderr=rows["stderr"],
            mean_running_sup=rows["running"],
            norm_tlogt=[norm_tlogt(t) for t in t_values],
            norm_tloglogt=[norm_tloglogt(t) for t in t_values],
            ratio_tlogt=[m / norm_tlogt(t) for m, t in zip(rows["mean"], t_values)],
            ratio_tloglogt=[m / norm_tloglogt(t) for m, t in zip(rows["mean"], t_values)],
            e_t=rows["e"],
            e_t_stderr=rows["e_err"],
            centered_mean=rows["c_mean"],
            centered_iqr=rows["c_iqr"],
            min_label_gap=rows["gap"],
            count_increases=rows["inc"],
        )

    def arratia_reference(
        self,
        config: SimConfig,
        q: float,
        n_min: int,
        n_max: int,
        replicas: Optional[int] = None,
    ) -> DeviationSeries:
        """
        Sup deviations of the Arratia flow on the levels, grid and step count of lil_series.

        Args:
            config: Configuration of the flow being compared; only phi changes
            q: Ratio of the geometric sequence
            n_min, n_max: Level range, all levels below 1/e
            replicas: Replicas per level (defaults to config.replicas)

        Returns:
            DeviationSeries of kind arratia_reference
        """
        levels = self._levels(q, n_min, n_max)
        replicas = replicas or config.replicas
        arratia = config.model_copy(update={
            "phi": CovarianceModel(family=CovarianceFamily.ARRATIA),
            "couple_tangent": False,
        })
        rows = {key: [] for key in ("t", "mean", "median", "stderr", "gap", "inc")}

        for level in levels:
            t = q ** level
            level_config = self._level_config(arratia, t, level).model_copy(update={"grid": GridKind.SQRT})
            records = self._level_records(level_config, level, replicas)
            worst_gap, increases = structure_summary(records)
            sups = np.array([sup_deviation(rec, t) for rec in records])
            rows["t"].append(t)
            rows["mean"].append(float(np.mean(sups)))
            rows["median"].append(float(np.median(sups)))
            rows["stderr"].append(_stderr(sups))
            rows["gap"].append(worst_gap)
            rows["inc"].append(increases)

        t_values = rows["t"]
        return DeviationSeries(
            kind="arratia_reference",
            q=q,
            levels=levels,
            t_values=t_values,
            mean=rows["mean"],
            median=rows["median"],
            stderr=rows["stderr"],
            norm_tlogt=[norm_tlogt(t) for t in t_values],
            norm_tloglogt=[norm_tloglogt(t) for t in t_values],
            ratio_tlogt=[m / norm_tlogt(t) for m, t in zip(rows["mean"], t_values)],
            ratio_tloglogt=[m / norm_tloglogt(t) for m, t in zip(rows["mean"], t_values)],
            min_label_gap=rows["gap"],
            count_increases=rows["inc"],
        )

    def coupling_gap_series(
        self,
        config: SimConfig,
        q: float,
        n_min: int,
        n_max: int,
        replicas: Optional[int] = None,
    ) -> DeviationSeries:
        """
        sup_k |X(u_k, t_n) - Y(u_k, t_n)| along t_n = q^n, with qv_gap / t_n.

        The grid follows config.grid per level: sqrt grid at t_n, log grid at
        level n, or the explicit points.

        Args:
            config: Coupled configuration with a continuous phi
            q: Ratio of the geometric sequence
            n_min, n_max: Level range, all levels below 1/e
            replicas: Coupled replicas per level (defaults to config.replicas)

        Returns:
            DeviationSeries
        """
        if not config.phi.is_continuous:
            raise ConfigInvalid("coupling needs a continuous phi")
        if not config.couple_tangent:
            raise ConfigInvalid("coupling needs couple_tangent = true")
        levels = self._levels(q, n_min, n_max)
        replicas = replicas or config.replicas
        rows = {key: [] for key in ("t", "mean", "median", "stderr", "gap", "qv", "worst", "inc")}

        for level in levels:
            t = q ** level
            level_config = self._level_config(config, t, level)
            try:
                records = self.flow.run_replicas(
                    lambda r: self.flow.simulate_coupled(level_config, r), range(replicas)
                )
            except Exception as e:
                logger.error(f"Coupling level n={level} failed: {e}")
                raise

            worst_gap, increases = structure_summary([rec.x for rec in records])
            gaps = np.array([coupling_gap(rec.x, rec.y, t) for rec in records])
            qv = np.array([self.flow.qv_gap(rec, config.phi) for rec in records])
            rows["t"].append(t)
            rows["mean"].append(float(np.mean(gaps)))
            rows["median"].append(float(np.median(gaps)))
            rows["stderr"].append(_stderr(gaps))
            rows["gap"].append(float(np.median(gaps)) / math.sqrt(t * math.log(math.log(1.0 / t))))
            rows["qv"].append(float(np.median(qv)) / t)
            rows["worst"].append(worst_gap)
            rows["inc"].append(increases)
            logger.info(
                f"Coupling n={level} t={t:.3e}: median gap ratio {rows['gap'][-1]:.4f}, "
                f"qv/t {rows['qv'][-1]:.4e}"
            )

        t_values = rows["t"]
        return DeviationSeries(
            kind="coupling",
            q=q,
            levels=levels,
            t_values=t_values,
            mean=rows["mean"],
            median=rows["median"],
            stderr=rows["stderr"],
            norm_tlogt=[norm_tlogt(t) for t in t_values],
            norm_tloglogt=[norm_tloglogt(t) for t in t_values],
            ratio_tlogt=[m / norm_tlogt(t) for m, t in zip(rows["mean"], t_values)],
            ratio_tloglogt=[m / norm_tloglogt(t) for m, t in zip(rows["mean"], t_values)],
            gap_ratio_median=rows["gap"],
            qv_ratio_median=rows["qv"],
            min_label_gap=rows["worst"],
            count_increases=rows["inc"],
        )

    def lil_verdicts(
        self, series: DeviationSeries, params: AnalysisParams, every_level: bool = False
    ) -> List[Verdict]:
        """
        Tolerance-band checks of the upper bound and the centered fluctuation.

        Both apply for t <= ratio_t_max; every_level extends the upper bound
        to all levels, as for the Arratia flow.
        """
        verdicts = []
        limit = 1.0 + params.band
        for t, ratio, stderr, scale in zip(
            series.t_values, series.ratio_tlogt, series.stderr, series.norm_tlogt
        ):
            if not (every_level or at_most(t, params.ratio_t_max)):
                continue
            verdicts.append(Verdict(
                name=f"ratio_tlogt[t={t:.3e}]",
                passed=ratio <= limit,
                observed=ratio,
                bound=limit,
                slack=params.band,
                detail=f"stderr of ratio {stderr / scale:.3e}",
            ))
        for t, c_mean, c_iqr in zip(series.t_values, series.centered_mean, series.centered_iqr):
            if c_mean is None or not at_most(t, params.ratio_t_max):
                continue
            verdicts.append(Verdict(
                name=f"centered_mean[t={t:.3e}]",
                passed=abs(c_mean) <= params.centered_bound,
                observed=c_mean,
                bound=params.centered_bound,
            ))
            verdicts.append(Verdict(
                name=f"centered_iqr[t={t:.3e}]",
                passed=c_iqr <= params.iqr_bound,
                observed=c_iqr,
                bound=params.iqr_bound,
            ))
        return verdicts

    def coupling_verdicts(self, series: DeviationSeries, params: AnalysisParams) -> List[Verdict]:
        """Trend checks: the normalized gap and qv_gap / t shrink along the levels"""
        gaps = [g for g in series.gap_ratio_median if g is not None]
        qv = [v for v in series.qv_ratio_median if v is not None]
        gap_inversions = _inversions(gaps)
        qv_inversions = _inversions(qv)
        shrink_bound = params.shrink_factor * gaps[0]
        return [
            Verdict(
                name="gap_ratio_non_increasing",
                passed=gap_inversions <= params.allowed_inversions,
                observed=float(gap_inversions),
                bound=float(params.allowed_inversions),
            ),
            Verdict(
                name="gap_ratio_final_vs_initial",
                passed=gaps[-1] <= shrink_bound,
                observed=gaps[-1],
                bound=shrink_bound,
                slack=params.shrink_factor,
            ),
            Verdict(
                name="qv_ratio_decreasing",
                passed=qv_inversions <= params.allowed_inversions and qv[-1] < qv[0],
                observed=float(qv_inversions),
                bound=float(params.allowed_inversions),
            ),
        ]

    def below_arratia_verdicts(self, series: DeviationSeries, reference: DeviationSeries) -> List[Verdict]:
        """Mean sup of a continuous flow against the Arratia flow at the same t"""
        if series.t_values != reference.t_values:
            raise ConfigInvalid("reference series covers different levels")
        verdicts = []
        for t, mean, stderr, ref_mean, ref_stderr, scale in zip(
            series.t_values, series.mean, series.stderr, reference.mean, reference.stderr, series.norm_tlogt
        ):
            slack = self.sigmas * (stderr + ref_stderr) / scale
            verdicts.append(Verdict(
                name=f"below_arratia[t={t:.3e}]",
                passed=mean / scale <= ref_mean / scale + slack,
                observed=mean / scale,
                bound=ref_mean / scale,
                slack=slack,
            ))
        return verdicts

    def structural_verdicts(self, records: List[FlowPathRecord]) -> List[Verdict]:
        """Exact monotonicity and non-increasing cluster counts on every record"""
        return _structure_verdicts(*structure_summary(records))

    def series_structural_verdicts(self, *series: DeviationSeries) -> List[Verdict]:
        """structural_verdicts over every level of the given series"""
        gaps = [g for s in series for g in s.min_label_gap]
        increases = [c for s in series for c in s.count_increases]
        if not gaps:
            raise ConfigInvalid("series carry no structural statistics")
        return _structure_verdicts(min(0.0, min(gaps)), sum(increases), detail=f"{len(gaps)} levels")

    @staticmethod
    def grid_size(config: SimConfig) -> int:
        if config.grid is GridKind.SQRT:
            return int(make_grid(config.t_target).size)
        if config.grid is GridKind.LOG:
            return int(log_grid(config.log_level).size)
        return len(config.points)
