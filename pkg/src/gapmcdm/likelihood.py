"""Complete-data log-densities on the Gaussian latent scale and their gradients.

Everything is computed for a batch of individuals at once: ``Y`` is N x J,
``Z`` is N x K.  The per-individual functions required by callers
(:func:`complete_loglik`, :func:`grad_z`, :func:`grad_params` and the aPM
counterparts) are one-row views of the batch code.

Gradient with respect to a Cholesky factor ``L`` of the latent covariance,
for ``x = L^{-1}(z - m)``::

    d/dL [-log|L| - x'x/2] = tril(L^{-T} (x x' - I))
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np
from scipy.linalg import solve_triangular

from . import _kernels
from .exceptions import NumericalError
from .model import ApmParams, GapmParams, QMatrix, normal_cdf, normal_pdf

EPS_PI = 1e-12
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class LatentPoint:
    """Latent position ``z`` on the Gaussian scale and ``u = Phi(z)``."""

    z: np.ndarray
    u: np.ndarray

    @classmethod
    def from_z(cls, z) -> "LatentPoint":
        z = np.array(z, dtype=float)
        return cls(z, normal_cdf(z))


@dataclass
class ParamGradient:
    d_alpha: np.ndarray
    d_theta: np.ndarray
    d_chol: np.ndarray


@dataclass
class ApmGradient:
    d_delta: np.ndarray
    d_mean: np.ndarray
    d_cov_chol: np.ndarray


@dataclass
class Terms:
    """Per-row quantities shared by the log-density and all gradients."""

    loglik: np.ndarray  # (N,)
    grad_z: np.ndarray  # (N, K)
    z: np.ndarray
    u: np.ndarray
    x: np.ndarray  # whitened latent L^{-1}(z - m), (N, K)
    r: np.ndarray  # d loglik / d pi, (N, J)
    pi: np.ndarray
    bern: np.ndarray  # per-item Bernoulli log-mass, (N, J)
    seg: np.ndarray | None = None  # GaPM only
    frac: np.ndarray | None = None

    def where(self, mask, other: "Terms") -> "Terms":
        """Rows from ``other`` where ``mask`` holds, from ``self`` elsewhere."""
        out = {}
        for f in fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            if a is None:
                out[f.name] = None
                continue
            m = mask.reshape((-1,) + (1,) * (a.ndim - 1))
            out[f.name] = np.where(m, b, a)
        return Terms(**out)


def _bernoulli(Y, pi):
    pic = np.clip(pi, EPS_PI, 1.0 - EPS_PI)
    bern = np.where(Y == 1, np.log(pic), np.log(1.0 - pic))
    r = np.where(Y == 1, 1.0 / pic, -1.0 / (1.0 - pic))
    return bern, r


def _gaussian_prior(Z, chol, mean=None):
    """Log N(z; mean, chol chol') per row, its z-gradient and whitened points."""
    d = Z if mean is None else Z - mean
    x = solve_triangular(chol, d.T, lower=True)  # (K, N)
    K = chol.shape[0]
    logdet = np.sum(np.log(np.abs(np.diag(chol))))
    logp = -0.5 * np.sum(x * x, axis=0) - logdet - 0.5 * K * _LOG_2PI
    grad = -solve_triangular(chol.T, x, lower=False).T
    return logp, grad, x.T


def _chol_gradient(chol, X):
    """Summed gradient of the Gaussian log-density w.r.t. its Cholesky factor."""
    n, K = X.shape
    M = X.T @ X - n * np.eye(K)
    return np.tril(solve_triangular(chol.T, M, lower=False))


def gapm_terms(Y, Z, params: GapmParams, q: QMatrix) -> Terms:
    Y = np.ascontiguousarray(Y, dtype=np.int8)
    Z = np.ascontiguousarray(Z, dtype=float)
    N, K = Z.shape
    J = params.J
    u = normal_cdf(Z)
    seg = np.empty((N, K), dtype=np.intp)
    frac = np.empty((N, K))
    theta = params.theta
    cum = np.cumsum(theta, axis=-1) - theta
    w = params.alpha * q.entries
    loglik = np.empty(N)
    gz = np.empty((N, K))
    r = np.empty((N, J))
    pi = np.empty((N, J))
    bern = np.empty((N, J))
    x = np.empty((N, K))
    _kernels.gapm_rows(Y, Z, u, params.grid.breakpoints, w, theta, cum, params.grid.widths,
                       np.ascontiguousarray(params.chol), EPS_PI, loglik, gz, r, pi, bern, x, seg, frac)
    return Terms(loglik, gz, Z, u, x, r, pi, bern, seg, frac)


def gapm_param_grad(terms: Terms, params: GapmParams, q: QMatrix) -> ParamGradient:
    """Gradient of the summed complete-data log-density over the batch rows."""
    theta = params.theta
    cum = np.cumsum(theta, axis=-1) - theta
    d_alpha = np.zeros(params.alpha.shape)
    H = np.zeros(theta.shape)
    F = np.zeros(theta.shape)
    _kernels.gapm_grad_rows(terms.r, terms.seg, terms.frac, params.alpha, q.mask,
                            theta, cum, d_alpha, H, F)
    # increments left of the located segment enter g with coefficient one
    d_theta = np.cumsum(H[..., ::-1], axis=-1)[..., ::-1] - H + F
    d_chol = _chol_gradient(params.chol, terms.x)
    return ParamGradient(d_alpha, d_theta, d_chol)


def apm_terms(Y, Z, params: ApmParams, q: QMatrix) -> Terms:
    Y = np.asarray(Y)
    Z = np.asarray(Z, dtype=float)
    u = normal_cdf(Z)
    slopes = params.delta[:, 1:] * q.entries
    # row-wise sums instead of BLAS products: a row's value must not depend on
    # how many rows share the call, or threaded sweeps would change results
    pi = params.delta[:, 0][None, :] + (u[:, None, :] * slopes[None, :, :]).sum(axis=-1)
    bern, r = _bernoulli(Y, pi)
    logp, gprior, x = _gaussian_prior(Z, params.cov_chol, params.mean)
    loglik = bern.sum(axis=1) + logp
    gz = (r[:, :, None] * slopes[None, :, :]).sum(axis=1) * normal_pdf(Z) + gprior
    return Terms(loglik, gz, Z, u, x, r, pi, bern)


def apm_param_grad(terms: Terms, params: ApmParams, q: QMatrix) -> ApmGradient:
    r = terms.r
    d_delta = np.empty(params.delta.shape)
    d_delta[:, 0] = r.sum(axis=0)
    d_delta[:, 1:] = (r.T @ terms.u) * q.entries
    C = params.cov_chol
    d_mean = solve_triangular(C.T, terms.x.sum(axis=0), lower=False)
    return ApmGradient(d_delta, d_mean, _chol_gradient(C, terms.x))


def _check_finite(terms: Terms):
    if np.isfinite(terms.loglik).all():
        return
    bad = np.flatnonzero(~np.isfinite(terms.bern).all(axis=0))
    item = int(bad[0]) if bad.size else None
    raise NumericalError("complete-data log-density is not finite", item=item)


def _row(y_row, point: LatentPoint):
    return np.asarray(y_row)[None, :], np.asarray(point.z, dtype=float)[None, :]


def complete_loglik(y_row, point: LatentPoint, params: GapmParams, q: QMatrix) -> float:
    """log f(y, z) for one individual under the GaPM-CDM."""
    t = gapm_terms(*_row(y_row, point), params, q)
    _check_finite(t)
    return float(t.loglik[0])


def grad_z(y_row, point: LatentPoint, params: GapmParams, q: QMatrix) -> np.ndarray:
    t = gapm_terms(*_row(y_row, point), params, q)
    _check_finite(t)
    return t.grad_z[0]


def grad_params(y_row, point: LatentPoint, params: GapmParams, q: QMatrix) -> ParamGradient:
    t = gapm_terms(*_row(y_row, point), params, q)
    _check_finite(t)
    return gapm_param_grad(t, params, q)


def apm_complete_loglik(y_row, point: LatentPoint, params: ApmParams, q: QMatrix) -> float:
    t = apm_terms(*_row(y_row, point), params, q)
    _check_finite(t)
    return float(t.loglik[0])


def apm_grads(y_row, point: LatentPoint, params: ApmParams, q: QMatrix):
    """Return ``(grad_z, ApmGradient)`` for one individual."""
    t = apm_terms(*_row(y_row, point), params, q)
    _check_finite(t)
    return t.grad_z[0], apm_param_grad(t, params, q)


def terms(Y, Z, params, q: QMatrix) -> Terms:
    """Batch terms for either model family, chosen by the parameter type."""
    if isinstance(params, GapmParams):
        return gapm_terms(Y, Z, params, q)
    return apm_terms(Y, Z, params, q)


def param_grad(t: Terms, params, q: QMatrix):
    if isinstance(params, GapmParams):
        return gapm_param_grad(t, params, q)
    return apm_param_grad(t, params, q)
