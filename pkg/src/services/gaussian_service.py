"""
Gaussian Service - Reproducible Randomness and Correlated Increments

Provides counter-based random streams keyed by (seed, replica, counter) and
samples Gaussian vectors from possibly rank-deficient covariance matrices.
"""

from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Iterator, Optional, Tuple, Union
import logging

import numpy as np
from scipy.special import ndtri

from src.core.config import settings
from src.core.exceptions import FactorizationFailure, NotSymmetric

logger = logging.getLogger(__name__)

_TWO_POW_MINUS_53 = 2.0 ** -53

Shape = Union[int, Tuple[int, ...]]


@lru_cache(maxsize=65536)
def _philox_key(seed: int, lane: int, replica: int) -> Tuple[int, int]:
    state = np.random.SeedSequence(seed, spawn_key=(lane, replica)).generate_state(2, dtype=np.uint64)
    return int(state[0]), int(state[1])


@dataclass(frozen=True)
class RngStream:
    """
    Immutable descriptor of a Philox counter-based stream.

    The key is derived from (seed, lane, replica); the counter selects a
    disjoint block of 2^128 Philox outputs. Identical descriptors always
    produce identical draws, whatever the thread schedule.
    """
    seed: int
    replica: int = 0
    counter: int = 0
    lane: int = 0

    def at(self, counter: int) -> "RngStream":
        return replace(self, counter=counter)

    def for_replica(self, replica: int) -> "RngStream":
        return replace(self, replica=replica, counter=0)

    def for_lane(self, lane: int) -> "RngStream":
        return replace(self, lane=lane, counter=0)

    def _bit_generator(self) -> np.random.Philox:
        k0, k1 = _philox_key(self.seed, self.lane, self.replica)
        counter = np.array([0, 0, self.counter & 0xFFFFFFFFFFFFFFFF, 0], dtype=np.uint64)
        return np.random.Philox(counter=counter, key=np.array([k0, k1], dtype=np.uint64))

    def uniforms(self, size: Shape) -> np.ndarray:
        """Uniforms in (0, 1) built from the top 53 bits of 64-bit words"""
        shape = (size,) if isinstance(size, int) else tuple(size)
        count = int(np.prod(shape)) if shape else 1
        raw = self._bit_generator().random_raw(count)
        u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * _TWO_POW_MINUS_53
        return u.reshape(shape)

    def standard_normals(self, size: Shape) -> np.ndarray:
        """Standard normals by inverse CDF of uniforms"""
        return ndtri(self.uniforms(size))


@dataclass(frozen=True)
class PsdFactor:
    """Lower-triangular factor L with L L^T = matrix + jitter_used * I"""
    dim: int
    lower_factor: np.ndarray
    jitter_used: float = 0.0
    clipped: bool = False


class GaussianService:
    """Service for factoring covariance matrices and drawing correlated increments"""

    def __init__(self, max_jitter: float = settings.max_jitter, batch_size: int = settings.batch_size):
        self.max_jitter = max_jitter
        self.batch_size = batch_size

    def jitter_ladder(self, max_jitter: float) -> Iterator[float]:
        """0, 1e-12, 1e-10, ... not exceeding max_jitter"""
        yield 0.0
        jitter = 1e-12
        while jitter <= max_jitter * (1 + 1e-9):
            yield jitter
            jitter *= 100.0

    def factor_psd(self, matrix: np.ndarray, max_jitter: Optional[float] = None) -> PsdFactor:
        """
        Factor a symmetric PSD matrix, escalating jitter and clipping if needed.

        Args:
            matrix: Symmetric matrix
            max_jitter: Largest diagonal jitter to try (defaults to settings)

        Returns:
            PsdFactor
        """
        a = np.asarray(matrix, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise NotSymmetric(f"expected a square matrix, got shape {a.shape}")
        scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
        if not np.allclose(a, a.T, rtol=0.0, atol=1e-12 * scale):
            raise NotSymmetric("matrix is not symmetric")
        max_jitter = self.max_jitter if max_jitter is None else max_jitter
        if max_jitter < 0:
            raise ValueError("max_jitter must be non-negative")

        dim = a.shape[0]
        identity = np.eye(dim)
        for jitter in self.jitter_ladder(max_jitter):
            try:
                lower = np.linalg.cholesky(a + jitter * identity if jitter else a)
            except np.linalg.LinAlgError:
                continue
            if np.all(np.isfinite(lower)):
                if jitter:
                    logger.debug(f"Cholesky of {dim}x{dim} matrix needed jitter {jitter:g}")
                return PsdFactor(dim=dim, lower_factor=lower, jitter_used=jitter)

        logger.debug(f"Jitter up to {max_jitter:g} failed for {dim}x{dim} matrix; clipping eigenvalues")
        return self._clipped_factor(a)

    @staticmethod
    def _clipped_factor(a: np.ndarray) -> PsdFactor:
        """Nearest PSD matrix in Frobenius norm, factored through a QR decomposition"""
        try:
            eigenvalues, vectors = np.linalg.eigh(0.5 * (a + a.T))
            root = np.sqrt(np.clip(eigenvalues, 0.0, None))
            # A_+ = (S V^T)^T (S V^T) = R^T R with S V^T = Q R
            _, r = np.linalg.qr(root[:, None] * vectors.T)
        except np.linalg.LinAlgError as e:
            logger.error(f"Eigenvalue clipping failed: {e}")
            raise FactorizationFailure(str(e)) from e

        lower = r.T
        signs = np.where(np.diag(lower) < 0, -1.0, 1.0)
        lower = lower * signs[None, :]
        if not np.all(np.isfinite(lower)):
            raise FactorizationFailure("clipped factor is not finite")
        return PsdFactor(dim=a.shape[0], lower_factor=lower, jitter_used=0.0, clipped=True)

    @staticmethod
    def sample_increment(factor: PsdFactor, scale: float, rng: RngStream) -> np.ndarray:
        """
        Draw one increment with covariance scale^2 * L L^T.

        Args:
            factor: Factor of the target covariance
            scale: Positive scale, typically sqrt(dt)
            rng: Stream descriptor supplying the standard normals

        Returns:
            Vector of length factor.dim
        """
        if scale <= 0:
            raise ValueError("scale must be positive")
        xi = rng.standard_normals(factor.dim)
        return scale * (factor.lower_factor @ xi)

    def sample_batch(self, factor: PsdFactor, scale: float, rng: RngStream, n: int) -> np.ndarray:
        """Draw n independent increments as rows, one stream counter per batch"""
        rows = []
        for batch, start in enumerate(range(0, n, self.batch_size)):
            size = min(self.batch_size, n - start)
            xi = rng.at(batch).standard_normals((size, factor.dim))
            rows.append(xi @ factor.lower_factor.T)
        return scale * np.concatenate(rows, axis=0)

    def normal_batches(self, rng: RngStream, n: int, dim: int) -> Iterator[np.ndarray]:
        """Yield standard normal blocks of at most batch_size rows"""
        for batch, start in enumerate(range(0, n, self.batch_size)):
            size = min(self.batch_size, n - start)
            yield rng.at(batch).standard_normals((size, dim))
