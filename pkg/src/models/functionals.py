"""
Test functions for the comparison and concentration checks.

Each function maps a batch of points, shape (n, d), to values of shape (n,).
Functions that enter the interpolation identity also provide Hessians of
shape (n, d, d).
"""

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.special import logsumexp, softmax

from src.core.config import settings


ValueFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class TestFunction:
    """A function of a d-dimensional point, optionally with second derivatives"""
    __test__ = False  # not a pytest class

    name: str
    value: ValueFn
    hessian: Optional[ValueFn] = None
    lipschitz: Optional[float] = None

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.value(np.atleast_2d(x))

    @property
    def is_smooth(self) -> bool:
        return self.hessian is not None


def coordinate_max() -> TestFunction:
    return TestFunction(
        name="max",
        value=lambda x: np.max(x, axis=1),
        lipschitz=1.0,
    )


def coordinate_min() -> TestFunction:
    return TestFunction(
        name="min",
        value=lambda x: np.min(x, axis=1),
        lipschitz=1.0,
    )


def smoothed_max(beta: float = settings.smoothing_beta) -> TestFunction:
    """
    Log-sum-exp mollification of the coordinate maximum.

    f(x) = log(sum_i exp(beta * x_i)) / beta, with Hessian
    beta * (diag(p) - p p^T) for p = softmax(beta * x). Off-diagonal entries
    are non-positive and every row sums to zero.
    """

    def value(x: np.ndarray) -> np.ndarray:
        return logsumexp(beta * x, axis=1) / beta

    def hessian(x: np.ndarray) -> np.ndarray:
        p = softmax(beta * x, axis=1)
        outer = p[:, :, None] * p[:, None, :]
        diag = np.einsum("ni,ij->nij", p, np.eye(x.shape[1]))
        return beta * (diag - outer)

    return TestFunction(name=f"smoothed_max(beta={beta:g})", value=value, hessian=hessian, lipschitz=1.0)


def linear(weights: np.ndarray) -> TestFunction:
    w = np.asarray(weights, dtype=float)

    def hessian(x: np.ndarray) -> np.ndarray:
        return np.zeros((x.shape[0], x.shape[1], x.shape[1]))

    return TestFunction(
        name="linear",
        value=lambda x: x @ w,
        hessian=hessian,
        lipschitz=float(np.linalg.norm(w)),
    )


def product_pair() -> TestFunction:
    """f(x) = x_1 x_2, whose only nonzero second derivatives are d12 f = d21 f = 1"""

    def hessian(x: np.ndarray) -> np.ndarray:
        h = np.zeros((x.shape[0], x.shape[1], x.shape[1]))
        h[:, 0, 1] = 1.0
        h[:, 1, 0] = 1.0
        return h

    return TestFunction(name="x1*x2", value=lambda x: x[:, 0] * x[:, 1], hessian=hessian)
