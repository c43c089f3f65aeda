"""Domain types, the monotone sieve family and the two item response functions.

Arrays held by the types are copied on construction and marked read-only,
so instances can be shared freely between threads.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import special

from .exceptions import DomainError, InvalidDesignError

ATOL = 1e-10
DIAG_FLOOR = 1e-6


def _frozen(a, dtype=float):
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


# ---------------------------------------------------------------------------
# special functions
# ---------------------------------------------------------------------------


def normal_cdf(x):
    """Standard normal CDF (Cephes ``ndtr``, accurate to full double precision)."""
    return special.ndtr(x)


def normal_pdf(x):
    x = np.asarray(x, dtype=float)
    return np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)


def normal_quantile(p):
    """Inverse standard normal CDF; raises :class:`DomainError` outside (0, 1)."""
    arr = np.asarray(p, dtype=float)
    if np.any(~(arr > 0.0) | ~(arr < 1.0)):
        raise DomainError("normal_quantile requires 0 < p < 1")
    return special.ndtri(p)


def beta_cdf(a, b, x):
    """Regularised incomplete beta function I_x(a, b)."""
    if not (a > 0 and b > 0):
        raise DomainError(f"beta_cdf shape parameters must be positive, got a={a}, b={b}")
    arr = np.asarray(x, dtype=float)
    if np.any(~(arr >= 0.0) | ~(arr <= 1.0)):
        raise DomainError("beta_cdf requires 0 <= x <= 1")
    return special.betainc(a, b, x)


# ---------------------------------------------------------------------------
# design and data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QMatrix:
    """Binary J x K item-attribute design.

    ``exploratory`` marks the all-ones matrix used when no design is known.
    """

    entries: np.ndarray
    exploratory: bool = False

    def __post_init__(self):
        e = np.asarray(self.entries)
        if e.ndim != 2 or e.shape[1] < 1:
            raise InvalidDesignError(f"Q-matrix must be a J x K grid, got shape {e.shape}")
        if not np.all((e == 0) | (e == 1)):
            raise InvalidDesignError("Q-matrix entries must be 0 or 1")
        if self.exploratory and not np.all(e == 1):
            raise InvalidDesignError("an exploratory Q-matrix is all ones")
        empty = np.flatnonzero(e.sum(axis=1) == 0)
        if empty.size:
            raise InvalidDesignError(f"Q-matrix row {int(empty[0])} has no attribute")
        object.__setattr__(self, "entries", _frozen(e, dtype=np.int8))

    @classmethod
    def full(cls, J: int, K: int) -> "QMatrix":
        return cls(np.ones((J, K), dtype=np.int8), exploratory=True)

    @property
    def J(self) -> int:
        return self.entries.shape[0]

    @property
    def K(self) -> int:
        return self.entries.shape[1]

    @property
    def mask(self) -> np.ndarray:
        return self.entries.astype(bool)

    def row(self, j: int) -> np.ndarray:
        return self.entries[j]


@dataclass(frozen=True)
class Dataset:
    """N x J binary responses, one row per individual."""

    responses: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.responses)
        if y.ndim != 2:
            raise InvalidDesignError(f"responses must be an N x J grid, got shape {y.shape}")
        if not np.all((y == 0) | (y == 1)):
            raise InvalidDesignError("responses must be 0/1 without missing values")
        object.__setattr__(self, "responses", _frozen(y, dtype=np.int8))

    @property
    def N(self) -> int:
        return self.responses.shape[0]

    @property
    def J(self) -> int:
        return self.responses.shape[1]

    def subset(self, rows) -> "Dataset":
        return Dataset(self.responses[np.asarray(rows)])


# ---------------------------------------------------------------------------
# sieve
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KnotGrid:
    """Breakpoints 0 = b_0 < b_1 < ... < b_S = 1 of the piecewise-linear sieve."""

    breakpoints: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.breakpoints, dtype=float)
        if b.ndim != 1 or b.size < 3:
            raise DomainError("a knot grid needs at least two segments")
        if b[0] != 0.0 or b[-1] != 1.0:
            raise DomainError("knot grid must start at 0 and end at 1")
        if np.any(np.diff(b) <= 0):
            raise DomainError("knot grid must be strictly increasing")
        object.__setattr__(self, "breakpoints", _frozen(b))
        object.__setattr__(self, "_widths", _frozen(np.diff(b)))

    @classmethod
    def from_interior(cls, knots: Sequence[float]) -> "KnotGrid":
        """Grid from interior knots, adding the endpoints 0 and 1."""
        return cls(np.concatenate(([0.0], np.asarray(knots, dtype=float), [1.0])))

    @property
    def S(self) -> int:
        return self.breakpoints.size - 1

    @property
    def widths(self) -> np.ndarray:
        return self._widths

    @property
    def interior(self) -> np.ndarray:
        return self.breakpoints[1:-1]

    def locate(self, x):
        """Segment index and within-segment fraction for points in [0, 1].

        A point on a breakpoint belongs to the segment on its right; x = 1
        belongs to the last segment with fraction 1.
        """
        x = np.asarray(x, dtype=float)
        seg = np.clip(np.searchsorted(self.breakpoints, x, side="right") - 1, 0, self.S - 1)
        frac = (x - self.breakpoints[seg]) / self._widths[seg]
        return seg, frac


def _check_unit_interval(x):
    arr = np.asarray(x, dtype=float)
    if np.any(~(arr >= 0.0) | ~(arr <= 1.0)):
        raise DomainError("sieve functions are defined on [0, 1]")
    return arr


@dataclass(frozen=True)
class SieveMonotone:
    """Monotone piecewise-linear g: [0, 1] -> [0, 1] with simplex increments."""

    theta: np.ndarray
    grid: KnotGrid

    def __post_init__(self):
        th = np.asarray(self.theta, dtype=float)
        if th.shape != (self.grid.S,):
            raise DomainError(f"theta must have length {self.grid.S}, got shape {th.shape}")
        if np.any(th < 0) or abs(th.sum() - 1.0) > ATOL:
            raise DomainError("sieve increments must lie on the probability simplex")
        object.__setattr__(self, "theta", _frozen(th))

    @classmethod
    def identity(cls, grid: KnotGrid) -> "SieveMonotone":
        return cls(grid.widths, grid)

    def __call__(self, x):
        return sieve_eval(self, x)


def sieve_eval(g: SieveMonotone, x):
    """Value of the sieve at ``x`` (scalar or array) in [0, 1]."""
    arr = _check_unit_interval(x)
    seg, frac = g.grid.locate(arr)
    cum = np.cumsum(g.theta) - g.theta
    value = cum[seg] + g.theta[seg] * frac
    # exact boundary values regardless of rounding in the cumulative sum
    value = np.where(arr == 0.0, 0.0, np.where(arr == 1.0, 1.0, value))
    return float(value) if np.ndim(value) == 0 else value


def sieve_derivatives(g: SieveMonotone, x: float):
    """Return ``(dg/dx, dg/dtheta)`` at a single point.

    At a breakpoint the right-hand segment is used; at x = 1 the last one.
    """
    _check_unit_interval(x)
    seg, frac = g.grid.locate(float(x))
    seg = int(seg)
    dtheta = np.zeros(g.grid.S)
    dtheta[:seg] = 1.0
    dtheta[seg] = float(frac)
    return float(g.theta[seg] / g.grid.widths[seg]), dtheta


# ---------------------------------------------------------------------------
# parameter bundles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ItemWeights:
    """Nonnegative attribute weights of one item."""

    alpha: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=float)
        if a.ndim != 1 or np.any(a < 0):
            raise DomainError("item weights must be a nonnegative vector")
        object.__setattr__(self, "alpha", _frozen(a))

    def check(self, q_row) -> None:
        q = np.asarray(q_row).astype(bool)
        if np.any(self.alpha[~q] != 0.0):
            raise DomainError("weights of attributes outside the Q-row must be zero")
        if abs(self.alpha[q].sum() - 1.0) > ATOL:
            raise DomainError("active weights must sum to one")

    @classmethod
    def equal(cls, q_row) -> "ItemWeights":
        q = np.asarray(q_row, dtype=float)
        return cls(q / q.sum())


@dataclass(frozen=True)
class CholeskyCorrelation:
    """Lower-triangular factor with unit-norm rows, so L L^T is a correlation matrix."""

    rows: np.ndarray

    def __post_init__(self):
        L = np.asarray(self.rows, dtype=float)
        check_cholesky_rows(L)
        object.__setattr__(self, "rows", _frozen(L))

    @classmethod
    def identity(cls, K: int) -> "CholeskyCorrelation":
        return cls(np.eye(K))

    @classmethod
    def from_correlation(cls, corr) -> "CholeskyCorrelation":
        L = np.linalg.cholesky(np.asarray(corr, dtype=float))
        return cls(L / np.linalg.norm(L, axis=1, keepdims=True))

    @property
    def K(self) -> int:
        return self.rows.shape[0]

    @property
    def sigma(self) -> np.ndarray:
        return self.rows @ self.rows.T


def check_cholesky_rows(L) -> None:
    if L.ndim != 2 or L.shape[0] != L.shape[1]:
        raise DomainError("Cholesky factor must be square")
    if np.any(np.triu(L, 1) != 0.0):
        raise DomainError("Cholesky factor must be lower triangular")
    if np.any(np.abs(np.linalg.norm(L, axis=1) - 1.0) > ATOL):
        raise DomainError("Cholesky rows must have unit Euclidean norm")
    first = np.zeros(L.shape[0])
    first[0] = 1.0
    if not np.array_equal(L[0], first):
        raise DomainError("first Cholesky row must be (1, 0, ..., 0)")
    if np.any(np.abs(np.diag(L)) < DIAG_FLOOR * (1 - 1e-9)):
        raise DomainError("Cholesky diagonal fell below the nonsingularity floor")


@dataclass(frozen=True)
class GapmParams:
    """Weights (J x K), sieve increments (J x K x S) and Cholesky rows (K x K).

    Sieve increments of inactive (j, k) pairs are stored but never used.
    """

    alpha: np.ndarray
    theta: np.ndarray
    chol: np.ndarray
    grid: KnotGrid

    def __post_init__(self):
        for name in ("alpha", "theta", "chol"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        J, K = self.alpha.shape
        if self.theta.shape != (J, K, self.grid.S) or self.chol.shape != (K, K):
            raise DomainError("inconsistent GaPM parameter shapes")

    @property
    def J(self) -> int:
        return self.alpha.shape[0]

    @property
    def K(self) -> int:
        return self.alpha.shape[1]

    @property
    def sigma(self) -> np.ndarray:
        return self.chol @ self.chol.T

    def weights(self, j: int) -> ItemWeights:
        return ItemWeights(self.alpha[j])

    def sieve(self, j: int, k: int) -> SieveMonotone:
        return SieveMonotone(self.theta[j, k], self.grid)

    def validate(self, q: QMatrix) -> None:
        """Raise :class:`DomainError` unless every constraint holds."""
        if q.entries.shape != self.alpha.shape:
            raise InvalidDesignError("Q-matrix does not match the parameter shapes")
        for j in range(self.J):
            self.weights(j).check(q.row(j))
            for k in np.flatnonzero(q.row(j)):
                self.sieve(j, k)
        CholeskyCorrelation(self.chol)

    def replace(self, **changes) -> "GapmParams":
        kw = dict(alpha=self.alpha, theta=self.theta, chol=self.chol, grid=self.grid)
        kw.update(changes)
        return GapmParams(**kw)


@dataclass(frozen=True)
class ApmParams:
    """aPM-CDM parameters: ``delta[j] = (intercept, slope_1..slope_K)``.

    The copula on the Gaussian scale has free ``mean`` and covariance
    ``cov_chol @ cov_chol.T``.
    """

    delta: np.ndarray
    mean: np.ndarray
    cov_chol: np.ndarray

    def __post_init__(self):
        for name in ("delta", "mean", "cov_chol"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        J, K1 = self.delta.shape
        if self.mean.shape != (K1 - 1,) or self.cov_chol.shape != (K1 - 1, K1 - 1):
            raise DomainError("inconsistent aPM parameter shapes")

    @property
    def J(self) -> int:
        return self.delta.shape[0]

    @property
    def K(self) -> int:
        return self.delta.shape[1] - 1

    @property
    def sigma(self) -> np.ndarray:
        return self.cov_chol @ self.cov_chol.T

    def validate(self, q: QMatrix) -> None:
        if q.entries.shape != (self.J, self.K):
            raise InvalidDesignError("Q-matrix does not match the parameter shapes")
        d = self.delta
        if np.any(d < -ATOL):
            raise DomainError("aPM intercepts and slopes must be nonnegative")
        if np.any(d[:, 1:][~q.mask] != 0.0):
            raise DomainError("slopes outside the Q-row must be zero")
        if np.any(d[:, 0] + (d[:, 1:] * q.entries).sum(axis=1) > 1.0 + ATOL):
            raise DomainError("intercept plus slopes must not exceed one")
        if np.any(np.triu(self.cov_chol, 1) != 0.0) or np.any(np.diag(self.cov_chol) <= 0):
            raise DomainError("covariance factor must be lower triangular with positive diagonal")

    def replace(self, **changes) -> "ApmParams":
        kw = dict(delta=self.delta, mean=self.mean, cov_chol=self.cov_chol)
        kw.update(changes)
        return ApmParams(**kw)


# ---------------------------------------------------------------------------
# item response functions
# ---------------------------------------------------------------------------


def irf_gapm(weights: ItemWeights, sieves, q_row, U) -> float:
    """Generalised additive IRF of one item at the attribute vector ``U``.

    ``sieves[k]`` may be ``None`` for attributes the item does not load on.
    """
    q = np.asarray(q_row).astype(bool)
    U = np.asarray(U, dtype=float)
    total = 0.0
    for k in np.flatnonzero(q):
        total += weights.alpha[k] * sieve_eval(sieves[k], U[k])
    return float(total)


def irf_apm(delta, q_row, U) -> float:
    """Linear aPM-CDM IRF: intercept plus masked slopes times ``U``."""
    delta = np.asarray(delta, dtype=float)
    q = np.asarray(q_row, dtype=float)
    return float(delta[0] + np.dot(delta[1:] * q, np.asarray(U, dtype=float)))


def gapm_pi(params: GapmParams, q: QMatrix, U) -> np.ndarray:
    """Success probabilities of every item at every row of ``U`` (M x K -> M x J)."""
    U = np.atleast_2d(np.asarray(U, dtype=float))
    seg, frac = params.grid.locate(U)
    theta = params.theta
    cum = np.cumsum(theta, axis=-1) - theta
    jj = np.arange(params.J)[None, :, None]
    kk = np.arange(params.K)[None, None, :]
    ss = seg[:, None, :]
    g = cum[jj, kk, ss] + theta[jj, kk, ss] * frac[:, None, :]
    return np.einsum("mjk,jk->mj", g, params.alpha * q.entries)


def apm_pi(params: ApmParams, q: QMatrix, U) -> np.ndarray:
    U = np.atleast_2d(np.asarray(U, dtype=float))
    return params.delta[:, 0][None, :] + U @ (params.delta[:, 1:] * q.entries).T


def identity_theta(grid: KnotGrid, J: int, K: int) -> np.ndarray:
    return np.broadcast_to(grid.widths, (J, K, grid.S)).copy()

