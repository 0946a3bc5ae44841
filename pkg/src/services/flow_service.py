"""
Flow Service - Point Motion of Harris Flows and Tangent Processes

Simulates the coalescing point motion X on a finite grid of initial points
(exactly-independent increments for the Arratia flow, Gram-correlated Euler
steps otherwise), the Gaussian tangent process Y, and the coupled pair.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, List, Optional, TypeVar
import logging
import math

import numpy as np

from src.core.config import settings
from src.core.exceptions import ConfigInvalid, FactorizationFailure
from src.models.schemas import (
    CoupledPathRecord,
    CovarianceFamily,
    CovarianceModel,
    FlowPathRecord,
    GridKind,
    SimConfig,
)
from src.services.covariance_service import CovarianceService
from src.services.gaussian_service import GaussianService, RngStream

logger = logging.getLogger(__name__)

T = TypeVar("T")

# RngStream lanes, so that flow, tangent and coupled draws never share keys
FLOW_LANE = 0
TANGENT_LANE = 1
COUPLED_LANE = 2


def make_grid(t: float) -> np.ndarray:
    """
    Initial points k * sqrt(t) for 0 <= k < ceil(t^(-1/2)).

    Args:
        t: Time in (0, 1]

    Returns:
        Increasing array of points in [0, 1)
    """
    if not 0.0 < t <= 1.0:
        raise ConfigInvalid(f"sqrt grid needs 0 < t <= 1, got {t}")
    root = math.sqrt(t)
    inverse = 1.0 / root
    count = max(1, math.ceil(inverse - 1e-9 * inverse))
    return np.arange(count) * root


def log_grid(level: int) -> np.ndarray:
    """floor(ln n) points k / ln n"""
    if level < 3:
        raise ConfigInvalid(f"log grid needs level >= 3, got {level}")
    log_n = math.log(level)
    return np.arange(int(math.floor(log_n))) / log_n


@dataclass
class FlowState:
    """
    Positions of the clusters of a monotone coalescing particle system.

    Clusters are contiguous runs of labels; starts[c] is the first label of
    cluster c and positions are strictly increasing (gaps above merge_eps).
    """
    labels: np.ndarray
    starts: np.ndarray
    positions: np.ndarray

    @classmethod
    def initial(cls, points: np.ndarray, merge_eps: float = 0.0) -> "FlowState":
        labels = np.asarray(points, dtype=float).copy()
        state = cls(labels=labels, starts=np.arange(labels.size), positions=labels.copy())
        state.merge(merge_eps)
        return state

    @property
    def cluster_count(self) -> int:
        return int(self.positions.size)

    @property
    def sizes(self) -> np.ndarray:
        return np.diff(np.append(self.starts, self.labels.size))

    @property
    def partition(self) -> np.ndarray:
        """Cluster index of each label"""
        return np.repeat(np.arange(self.cluster_count), self.sizes)

    def label_positions(self) -> np.ndarray:
        return np.repeat(self.positions, self.sizes)

    def advance(self, increments: np.ndarray, merge_eps: float = 0.0) -> None:
        self.positions = self.positions + increments
        self.merge(merge_eps)

    def merge(self, merge_eps: float = 0.0) -> None:
        """
        Merge clusters that crossed or came within merge_eps.

        Sweeps in label order; a merged cluster sits at the mean of the two
        positions and is re-checked against its left neighbour.
        """
        if self.positions.size < 2 or np.all(np.diff(self.positions) > merge_eps):
            return

        positions: List[float] = []
        starts: List[int] = []
        for position, start in zip(self.positions.tolist(), self.starts.tolist()):
            while positions and position - positions[-1] <= merge_eps:
                position = 0.5 * (positions.pop() + position)
                start = starts.pop()
            positions.append(position)
            starts.append(start)

        logger.debug(f"Merged {self.positions.size - len(positions)} clusters")
        self.positions = np.array(positions)
        self.starts = np.array(starts, dtype=int)


class _Recorder:
    """Collects states at the recording steps of a simulation"""

    def __init__(self, steps: np.ndarray, step: float, t_target: float, n_labels: int):
        self.steps = steps
        self.times = steps * step
        self.times[steps == steps[-1]] = t_target
        self.values = np.empty((steps.size, n_labels))
        self.cluster_ids = np.empty((steps.size, n_labels), dtype=int)
        self.cluster_counts = np.empty(steps.size, dtype=int)
        self._index = {int(s): i for i, s in enumerate(steps)}

    def wants(self, step: int) -> bool:
        return step in self._index

    def record(self, step: int, values: np.ndarray, cluster_ids: np.ndarray, count: int) -> None:
        i = self._index[step]
        self.values[i] = values
        self.cluster_ids[i] = cluster_ids
        self.cluster_counts[i] = count

    def finish(self, dt: float, replica: int) -> FlowPathRecord:
        return FlowPathRecord(
            times=self.times,
            values=self.values,
            cluster_ids=self.cluster_ids,
            cluster_counts=self.cluster_counts,
            dt=dt,
            replica=replica,
        )


class FlowService:
    """Service for simulating flows, tangent processes and their coupling"""

    def __init__(
        self,
        covariance_service: CovarianceService,
        gaussian_service: GaussianService,
        threads: int = settings.threads,
    ):
        """
        Initialize flow service.

        Args:
            covariance_service: Evaluates phi and Gram matrices
            gaussian_service: Factors covariances and draws increments
            threads: Worker threads used by run_replicas
        """
        self.covariance = covariance_service
        self.gaussian = gaussian_service
        self.threads = max(1, threads)
        logger.info(f"Flow service initialized with {self.threads} worker thread(s)")

    def grid_points(self, config: SimConfig) -> np.ndarray:
        if config.grid is GridKind.SQRT:
            return make_grid(config.t_target)
        if config.grid is GridKind.LOG:
            return log_grid(config.log_level)
        return np.asarray(config.points, dtype=float)

    @staticmethod
    def recording_steps(config: SimConfig) -> np.ndarray:
        """Step indices of the output grid, the checkpoints and the horizon"""
        n_steps = config.n_steps
        steps = set(np.rint(np.linspace(0, n_steps, config.output_times + 1)).astype(int).tolist())
        for checkpoint in config.checkpoints:
            if 0.0 < checkpoint <= config.t_target:
                steps.add(int(round(checkpoint / config.step)))
        steps.update({0, n_steps})
        return np.array(sorted(s for s in steps if 0 <= s <= n_steps), dtype=int)

    def simulate(self, config: SimConfig, replica: int) -> FlowPathRecord:
        """Exact Arratia dynamics for the Arratia phi, Euler-Maruyama otherwise"""
        if config.phi.family is CovarianceFamily.ARRATIA:
            return self.simulate_arratia(config, replica)
        return self.simulate_harris(config, replica)

    def simulate_harris(self, config: SimConfig, replica: int) -> FlowPathRecord:
        """
        Euler-Maruyama simulation of the Harris flow point motion.

        Each step factors the Gram matrix of the current cluster positions and
        adds a correlated increment scaled by sqrt(dt), then merges clusters
        that crossed.

        Args:
            config: Simulation configuration
            replica: Replica index keying the random stream

        Returns:
            FlowPathRecord
        """
        if config.phi.family is CovarianceFamily.ARRATIA:
            logger.warning("simulate_harris called with the Arratia phi; simulate_arratia is exact")

        def increments(state: FlowState, rng: RngStream, scale: float) -> np.ndarray:
            gram = self.covariance.gram(config.phi, state.positions)
            factor = self.gaussian.factor_psd(gram)
            return self.gaussian.sample_increment(factor, scale, rng)

        return self._run_flow(config, replica, increments)

    def simulate_arratia(self, config: SimConfig, replica: int) -> FlowPathRecord:
        """
        Simulate the Arratia flow: clusters move independently and merge on contact.

        Args:
            config: Simulation configuration with the Arratia phi
            replica: Replica index keying the random stream

        Returns:
            FlowPathRecord
        """
        if config.phi.family is not CovarianceFamily.ARRATIA:
            raise ConfigInvalid(f"simulate_arratia needs the Arratia phi, got {config.phi.label()}")

        def increments(state: FlowState, rng: RngStream, scale: float) -> np.ndarray:
            return scale * rng.standard_normals(state.cluster_count)

        return self._run_flow(config, replica, increments)

    def _run_flow(
        self,
        config: SimConfig,
        replica: int,
        increments: Callable[[FlowState, RngStream, float], np.ndarray],
    ) -> FlowPathRecord:
        points = self.grid_points(config)
        state = FlowState.initial(points, config.merge_eps)
        recorder = _Recorder(self.recording_steps(config), config.step, config.t_target, points.size)
        rng = RngStream(seed=config.seed, replica=replica, lane=FLOW_LANE)
        scale = math.sqrt(config.step)

        recorder.record(0, state.label_positions(), state.partition, state.cluster_count)
        try:
            for step in range(1, config.n_steps + 1):
                state.advance(increments(state, rng.at(step), scale), config.merge_eps)
                if recorder.wants(step):
                    recorder.record(step, state.label_positions(), state.partition, state.cluster_count)
        except Exception as e:
            logger.error(f"Flow simulation failed for replica {replica}: {e}")
            raise

        return recorder.finish(config.step, replica)

    def simulate_tangent(self, config: SimConfig, replica: int) -> FlowPathRecord:
        """
        Simulate the tangent process Y on the initial grid.

        The Gram matrix phi(u_i - u_j) is factored once; Y has independent
        Gaussian increments, so each recording interval is drawn in one step.

        Args:
            config: Simulation configuration
            replica: Replica index keying the random stream

        Returns:
            FlowPathRecord with a constant cluster count
        """
        points = self.grid_points(config)
        factor = self.gaussian.factor_psd(self.covariance.gram(config.phi, points))
        recorder = _Recorder(self.recording_steps(config), config.step, config.t_target, points.size)
        rng = RngStream(seed=config.seed, replica=replica, lane=TANGENT_LANE)
        labels = np.arange(points.size)

        y = points.copy()
        recorder.record(0, y, labels, points.size)
        for i in range(1, recorder.steps.size):
            interval = recorder.times[i] - recorder.times[i - 1]
            y = y + self.gaussian.sample_increment(factor, math.sqrt(interval), rng.at(i))
            recorder.record(int(recorder.steps[i]), y, labels, points.size)

        return recorder.finish(config.step, replica)

    def simulate_coupled(self, config: SimConfig, replica: int) -> CoupledPathRecord:
        """
        Simulate X and Y from one joint Gaussian increment per step.

        The joint covariance has blocks phi(X_i - X_j) on cluster positions,
        phi(X_i - u_j) across, and the fixed phi(u_i - u_j); coalescence acts on
        the X half only.

        Args:
            config: Configuration with couple_tangent set and a continuous phi
            replica: Replica index keying the random stream

        Returns:
            CoupledPathRecord
        """
        if not config.couple_tangent:
            raise ConfigInvalid("simulate_coupled needs couple_tangent = true")
        if not config.phi.is_continuous:
            raise ConfigInvalid("simulate_coupled needs a continuous phi, not arratia")

        points = self.grid_points(config)
        yy = self.covariance.gram(config.phi, points)
        state = FlowState.initial(points, config.merge_eps)
        steps = self.recording_steps(config)
        x_rec = _Recorder(steps, config.step, config.t_target, points.size)
        y_rec = _Recorder(steps, config.step, config.t_target, points.size)
        rng = RngStream(seed=config.seed, replica=replica, lane=COUPLED_LANE)
        scale = math.sqrt(config.step)
        labels = np.arange(points.size)

        y = points.copy()
        # per-label integral of 1 - phi(X(u, s) - u) ds, left point per step
        deficit = np.zeros(points.size)
        qv_path = [0.0]
        x_rec.record(0, state.label_positions(), state.partition, state.cluster_count)
        y_rec.record(0, y, labels, points.size)
        for step in range(1, config.n_steps + 1):
            c = state.cluster_count
            deficit += config.step * np.asarray(
                self.covariance.one_minus(config.phi, state.label_positions() - points)
            )
            xx = self.covariance.gram(config.phi, state.positions)
            xy = self.covariance.cross_gram(config.phi, state.positions, points)
            joint = np.block([[xx, xy], [xy.T, yy]])
            try:
                factor = self.gaussian.factor_psd(joint)
            except FactorizationFailure as e:
                logger.error(f"Replica {replica} aborted at step {step}: joint covariance of size {joint.shape[0]}: {e}")
                raise

            increment = self.gaussian.sample_increment(factor, scale, rng.at(step))
            state.advance(increment[:c], config.merge_eps)
            y = y + increment[c:]
            if x_rec.wants(step):
                x_rec.record(step, state.label_positions(), state.partition, state.cluster_count)
                y_rec.record(step, y, labels, points.size)
                qv_path.append(2.0 * float(np.max(deficit)))

        return CoupledPathRecord(
            x=x_rec.finish(config.step, replica),
            y=y_rec.finish(config.step, replica),
            qv_path=np.array(qv_path),
        )

    def qv_gap(self, coupled: CoupledPathRecord, phi: CovarianceModel, t: Optional[float] = None) -> float:
        """
        Quadratic-variation gap V(t) of X - Y.

        Returns sup over labels of 2 * int_0^t (1 - phi(X(u, s) - u)) ds. Records
        from simulate_coupled carry the per-step sum; otherwise a left Riemann
        sum over the recorded times is used.

        Args:
            coupled: Coupled record with matching grids
            phi: Covariation model used for the simulation
            t: Upper time, defaults to the last recorded time

        Returns:
            Non-negative gap estimate
        """
        x = coupled.x
        if x.values.shape != coupled.y.values.shape:
            raise ConfigInvalid("coupled record has mismatched X and Y grids")
        end = x.times.size - 1 if t is None else x.time_index(t)
        if end == 0:
            return 0.0
        if coupled.qv_path is not None:
            return float(coupled.qv_path[end])
        deficit = np.asarray(self.covariance.one_minus(phi, x.values[:end] - x.initial[None, :]))
        widths = np.diff(x.times[: end + 1])
        return float(2.0 * np.max(widths @ deficit))

    def sample_tangent_marginal(
        self, phi: CovarianceModel, points: np.ndarray, t: float, rng: RngStream, n: int
    ) -> np.ndarray:
        """n independent draws of Y(u, t) - u on the given points, as rows"""
        factor = self.gaussian.factor_psd(self.covariance.gram(phi, points))
        return self.gaussian.sample_batch(factor, math.sqrt(t), rng, n)

    def run_replicas(self, job: Callable[[int], T], replicas: Iterable[int]) -> List[T]:
        """Run independent replica jobs, returning results in replica order"""
        indices = list(replicas)
        if self.threads == 1 or len(indices) < 2:
            return [job(r) for r in indices]
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            return list(pool.map(job, indices))
