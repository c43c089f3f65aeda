"""Marginal log-likelihood by importance sampling, with a quadrature oracle.

The importance distribution for individual i is N(mu_i, Sigma_i + I) where
mu_i and Sigma_i are running posterior moments of the latent draws.  Each
individual's contribution is computed in log space (log-sum-exp), and its
Monte-Carlo standard error comes from the delta method:
se(log mean w) ~= sd(w) / (sqrt(M) mean(w)).
"""

from __future__ import annotations

import math
import warnings

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.special import logsumexp

from . import likelihood
from .exceptions import UnsupportedDimensionError
from .likelihood import EPS_PI
from .model import ApmParams, Dataset, GapmParams, QMatrix, apm_pi, gapm_pi, normal_cdf

_LOG_2PI = math.log(2.0 * math.pi)
_MAX_ROWS = 40_000


def _proposal_factor(cov, i):
    try:
        return np.linalg.cholesky(cov + np.eye(cov.shape[0]))
    except np.linalg.LinAlgError:
        warnings.warn(f"posterior covariance of unit {i} is not PSD; using an identity proposal",
                      RuntimeWarning, stacklevel=3)
        return np.eye(cov.shape[0])


def log_mean_exp(log_w):
    """Log of the mean of ``exp(log_w)`` along the last axis, with its delta-method SE."""
    log_w = np.asarray(log_w, dtype=float)
    m = log_w.shape[-1]
    if m < 2:
        raise ValueError("need at least two importance draws")
    est = logsumexp(log_w, axis=-1) - math.log(m)
    w = np.exp(log_w - log_w.max(axis=-1, keepdims=True))
    se = w.std(axis=-1, ddof=1) / (math.sqrt(m) * w.mean(axis=-1))
    return est, se


def is_loglik(data: Dataset, params, q: QMatrix, moments, m_draws: int = 2000, rng=None):
    """Importance-sampling estimate of the marginal log-likelihood.

    Returns ``(loglik, per_unit_se)``; the standard error of the total is
    ``sqrt(sum(per_unit_se**2))``.
    """
    if m_draws < 2:
        raise ValueError("need at least two importance draws")
    rng = np.random.default_rng(rng)
    N, K = data.N, q.K
    Y = data.responses
    per_unit = np.empty(N)
    se = np.empty(N)
    chunk = max(1, _MAX_ROWS // m_draws)
    for start in range(0, N, chunk):
        idx = np.arange(start, min(N, start + chunk))
        n = idx.size
        eps = rng.standard_normal((n, m_draws, K))
        factors = np.stack([_proposal_factor(moments.cov[i], i) for i in idx])
        z = moments.mean[idx, None, :] + np.einsum("nkl,nml->nmk", factors, eps)
        logdet = np.log(np.abs(np.diagonal(factors, axis1=1, axis2=2))).sum(axis=1)
        log_q = -0.5 * np.sum(eps * eps, axis=-1) - logdet[:, None] - 0.5 * K * _LOG_2PI
        Yr = np.repeat(Y[idx], m_draws, axis=0)
        with np.errstate(all="ignore"):
            joint = likelihood.terms(Yr, z.reshape(-1, K), params, q).loglik.reshape(n, m_draws)
        per_unit[idx], se[idx] = log_mean_exp(joint - log_q)
    return float(per_unit.sum()), se


def quad_loglik(data: Dataset, params, q: QMatrix, nodes_per_dim: int = 64) -> float:
    """Tensor-product Gauss-Hermite evaluation of the marginal log-likelihood (K <= 3)."""
    K = q.K
    if K > 3:
        raise UnsupportedDimensionError("quadrature oracle is limited to K <= 3")
    if data.J == 0:
        return 0.0
    x, w = hermegauss(nodes_per_dim)
    grids = np.meshgrid(*([x] * K), indexing="ij")
    X = np.stack([g.ravel() for g in grids], axis=1)
    logw = sum(np.log(np.meshgrid(*([w] * K), indexing="ij")[k].ravel()) for k in range(K))
    logw = logw - 0.5 * K * _LOG_2PI
    if isinstance(params, GapmParams):
        Z = X @ params.chol.T
        pi = gapm_pi(params, q, normal_cdf(Z))
    elif isinstance(params, ApmParams):
        Z = params.mean + X @ params.cov_chol.T
        pi = apm_pi(params, q, normal_cdf(Z))
    else:
        raise TypeError(f"unsupported parameter type {type(params).__name__}")
    pic = np.clip(pi, EPS_PI, 1.0 - EPS_PI)
    Y = data.responses.astype(float)
    cond = Y @ np.log(pic).T + (1.0 - Y) @ np.log(1.0 - pic).T  # (N, nodes)
    return float(logsumexp(cond + logw[None, :], axis=1).sum())
