"""Synthetic data for the confirmatory and exploratory simulation studies."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import DomainError
from .model import Dataset, QMatrix, beta_cdf, normal_cdf

BETA_SHAPES = ((3.0, 3.0), (1.0 / 3.0, 1.0 / 3.0), (1.0, 3.0), (3.0, 1.0))

_Q3_T = """
1 0 0 1 0 0 1 0 0 1 1 0 1 1 0 1 1 1 1 1
0 1 0 0 1 0 0 1 0 1 0 1 1 0 1 1 0 1 1 1
0 0 1 0 0 1 0 0 1 0 1 1 0 1 1 0 1 1 1 1
"""

_Q5_T = """
1 0 0 0 0 1 0 0 0 0 1 0 0 0 1 1 0 0 1 1
0 1 0 0 0 0 1 0 0 0 1 1 0 0 0 1 1 0 0 1
0 0 1 0 0 0 0 1 0 0 0 1 1 0 0 1 1 1 0 0
0 0 0 1 0 0 0 0 1 0 0 0 1 1 0 0 1 1 1 0
0 0 0 0 1 0 0 0 0 1 0 0 0 1 1 0 0 1 1 1
"""


def builtin_q(name: str) -> QMatrix:
    """The 20-item designs with three ("Q3") or five ("Q5") attributes."""
    table = {"Q3": _Q3_T, "Q5": _Q5_T}
    if name not in table:
        raise KeyError(f"unknown built-in Q-matrix {name!r}; choose Q3 or Q5")
    rows = [list(map(int, line.split())) for line in table[name].strip().splitlines()]
    return QMatrix(np.array(rows, dtype=np.int8).T)


def make_equicorr(K: int, sigma: float) -> np.ndarray:
    """sigma * 11' + (1 - sigma) I."""
    if not 0.0 <= sigma < 1.0:
        raise DomainError(f"equicorrelation must lie in [0, 1), got {sigma}")
    return sigma * np.ones((K, K)) + (1.0 - sigma) * np.eye(K)


def copula_from_noise(noise, corr) -> np.ndarray:
    L = np.linalg.cholesky(np.asarray(corr, dtype=float))
    return normal_cdf(np.asarray(noise, dtype=float) @ L.T)


def sample_copula(n: int, corr, rng: np.random.Generator) -> np.ndarray:
    """n draws of U with uniform marginals and Gaussian-copula dependence."""
    corr = np.asarray(corr, dtype=float)
    return copula_from_noise(rng.standard_normal((n, corr.shape[0])), corr)


def default_shape_map(J: int, K: int) -> np.ndarray:
    """Index into :data:`BETA_SHAPES` for every (j, k), cycling by j*K + k."""
    return (np.arange(J * K) % len(BETA_SHAPES)).reshape(J, K)


def equal_weights(q: QMatrix) -> np.ndarray:
    e = q.entries.astype(float)
    return e / e.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class GapmTruth:
    """True generating parameters of a GaPM-CDM dataset."""

    q: QMatrix
    weights: np.ndarray  # (J, K)
    shapes: np.ndarray  # (J, K) index into BETA_SHAPES
    corr: np.ndarray
    u: np.ndarray  # (N, K)

    def g(self, j: int, k: int, x):
        a, b = BETA_SHAPES[int(self.shapes[j, k])]
        return beta_cdf(a, b, np.clip(x, 0.0, 1.0))

    def pi(self, U) -> np.ndarray:
        U = np.atleast_2d(np.asarray(U, dtype=float))
        out = np.zeros((U.shape[0], self.q.J))
        for j in range(self.q.J):
            for k in np.flatnonzero(self.q.row(j)):
                out[:, j] += self.weights[j, k] * self.g(j, k, U[:, k])
        return out

    def irf(self, j: int):
        return lambda U: self.pi(U)[:, j]


@dataclass(frozen=True)
class ApmTruth:
    q: QMatrix
    delta: np.ndarray  # (J, K + 1)
    slip: np.ndarray
    mean: np.ndarray
    corr: np.ndarray
    u: np.ndarray

    def pi(self, U) -> np.ndarray:
        U = np.atleast_2d(np.asarray(U, dtype=float))
        return self.delta[:, 0][None, :] + U @ (self.delta[:, 1:] * self.q.entries).T

    def irf(self, j: int):
        return lambda U: self.pi(U)[:, j]


def _responses(pi, rng):
    return (rng.random(pi.shape) < pi).astype(np.int8)


def gen_gapm(n: int, q: QMatrix, corr, rng: np.random.Generator,
             shapes=None, weights=None):
    """Sample a GaPM-CDM dataset whose sieves are Beta CDFs.

    ``shapes`` defaults to :func:`default_shape_map`, ``weights`` to equal
    weights over each item's attributes.
    """
    shapes = default_shape_map(q.J, q.K) if shapes is None else np.asarray(shapes)
    weights = equal_weights(q) if weights is None else np.asarray(weights, dtype=float)
    U = sample_copula(n, corr, rng)
    truth = GapmTruth(q, weights, shapes, np.asarray(corr, dtype=float), U)
    return Dataset(_responses(truth.pi(U), rng)), truth


def gen_apm(n: int, q: QMatrix, corr, rng: np.random.Generator, mean=None,
            max_guess: float = 0.2, max_slip: float = 0.2):
    """Sample an aPM-CDM dataset with random guessing and slipping levels."""
    J, K = q.J, q.K
    mean = np.zeros(K) if mean is None else np.asarray(mean, dtype=float)
    guess = rng.uniform(0.0, max_guess, J)
    slip = rng.uniform(0.0, max_slip, J)
    span = 1.0 - guess - slip
    raw = rng.uniform(0.0, 1.0, (J, K)) * span[:, None] * q.entries
    # rescale so intercept + slopes + slip = 1
    slopes = raw * (span / raw.sum(axis=1))[:, None]
    slip = 1.0 - guess - slopes.sum(axis=1)
    delta = np.column_stack([guess, slopes])
    corr = np.asarray(corr, dtype=float)
    Z = mean + rng.standard_normal((n, K)) @ np.linalg.cholesky(corr).T
    U = normal_cdf(Z)
    truth = ApmTruth(q, delta, slip, mean, corr, U)
    return Dataset(_responses(truth.pi(U), rng)), truth
