"""Compiled per-row loops behind :mod:`gapmcdm.likelihood`."""

import math

import numpy as np
from numba import njit

# no nnan/ninf: non-finite values must survive to the acceptance checks
_FAST = {"reassoc", "contract", "arcp"}
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@njit(cache=True, nogil=True, error_model="numpy", fastmath=_FAST)
def whiten_rows(D, L, x, v):
    """x = L^{-1} d and v = L^{-T} x for every row d of D; returns x'x per row."""
    N, K = D.shape
    quad = np.empty(N)
    for n in range(N):
        q = 0.0
        for k in range(K):
            s = D[n, k]
            for m in range(k):
                s -= L[k, m] * x[n, m]
            x[n, k] = s / L[k, k]
            q += x[n, k] * x[n, k]
        for k in range(K - 1, -1, -1):
            s = x[n, k]
            for m in range(k + 1, K):
                s -= L[m, k] * v[n, m]
            v[n, k] = s / L[k, k]
        quad[n] = q
    return quad


@njit(cache=True, nogil=True, error_model="numpy", fastmath=_FAST)
def locate_rows(U, breaks, seg, frac):
    """Segment (right-continuous, last segment closed) and fraction per entry."""
    N, K = U.shape
    S = breaks.size - 1
    for n in range(N):
        for k in range(K):
            x = U[n, k]
            lo = 0
            hi = S
            while hi - lo > 1:
                mid = (lo + hi) // 2
                if breaks[mid] <= x:
                    lo = mid
                else:
                    hi = mid
            seg[n, k] = lo
            frac[n, k] = (x - breaks[lo]) / (breaks[lo + 1] - breaks[lo])


@njit(cache=True, nogil=True, error_model="numpy", fastmath=_FAST)
def gapm_rows(Y, Z, U, breaks, w, theta, cum, widths, L, eps, loglik, gz, r, pi, bern, x, seg, frac):
    N, K = Z.shape
    J = w.shape[0]
    locate_rows(U, breaks, seg, frac)
    v = np.empty((N, K))
    quad = whiten_rows(Z, L, x, v)
    logdet = 0.0
    for k in range(K):
        logdet += math.log(abs(L[k, k]))
    drift = np.empty(K)
    for n in range(N):
        for k in range(K):
            drift[k] = 0.0
        ll = 0.0
        for j in range(J):
            p = 0.0
            for k in range(K):
                if w[j, k] != 0.0:
                    s = seg[n, k]
                    p += w[j, k] * (cum[j, k, s] + theta[j, k, s] * frac[n, k])
            pi[n, j] = p
            pc = min(max(p, eps), 1.0 - eps)
            if Y[n, j] == 1:
                b = math.log(pc)
                rr = 1.0 / pc
            else:
                b = math.log(1.0 - pc)
                rr = -1.0 / (1.0 - pc)
            bern[n, j] = b
            r[n, j] = rr
            ll += b
            for k in range(K):
                if w[j, k] != 0.0:
                    s = seg[n, k]
                    drift[k] += rr * w[j, k] * theta[j, k, s] / widths[s]
        for k in range(K):
            z = Z[n, k]
            gz[n, k] = drift[k] * math.exp(-0.5 * z * z) * _INV_SQRT_2PI - v[n, k]
        loglik[n] = ll - 0.5 * quad[n] - logdet - K * _HALF_LOG_2PI


@njit(cache=True, nogil=True, error_model="numpy", fastmath=_FAST)
def gapm_grad_rows(r, seg, frac, alpha, qmask, theta, cum, d_alpha, H, F):
    """Accumulate weight gradients and per-segment masses over rows."""
    N, J = r.shape
    K = alpha.shape[1]
    for n in range(N):
        for j in range(J):
            rr = r[n, j]
            for k in range(K):
                if qmask[j, k]:
                    s = seg[n, k]
                    f = frac[n, k]
                    d_alpha[j, k] += rr * (cum[j, k, s] + theta[j, k, s] * f)
                    wv = rr * alpha[j, k]
                    H[j, k, s] += wv
                    F[j, k, s] += wv * f
