"""Stochastic-approximation mirror-descent (SA-MD) estimation.

Each iteration draws one Langevin transition per individual under the
current parameters (the SA step), sums the complete-data gradients at the
new draws and takes one mirror-descent step per parameter block.  The
estimate is the Polyak-Ruppert average of the iterates after burn-in, and
the EAP scores are the post-burn-in averages of the latent draws.

Random numbers for iteration t come from a stream keyed by (seed, t); row i
of that stream belongs to individual i, so splitting individuals across
worker threads cannot change the result.
"""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import likelihood, mala
from .exceptions import ConfigError, InvalidDesignError
from .mala import MalaConfig
from .mirror_descent import StepSchedule, update_apm, update_gapm
from .model import (
    ApmParams,
    Dataset,
    GapmParams,
    KnotGrid,
    QMatrix,
    identity_theta,
    normal_quantile,
)

log = logging.getLogger(__name__)

_INIT_STREAM = 0
_SA_STREAM = 1


@dataclass(frozen=True)
class FitConfig:
    iterations: int
    burn_in: int
    schedule: StepSchedule | None = None  # None: StepSchedule.default(N, model)
    mala: MalaConfig | None = None  # None: MalaConfig.default_for(K)
    seed: int = 0
    mode: str = "confirmatory"
    threads: int = 1
    misspecified: bool = False  # selects the damped aPM defaults
    checkpoint_every: int | None = None
    debug: bool = False

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("iterations must be positive")
        if not 0 <= self.burn_in < self.iterations:
            raise ConfigError(f"burn-in {self.burn_in} must be in [0, {self.iterations})")
        if self.mode not in ("confirmatory", "exploratory"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.threads < 1:
            raise ConfigError("threads must be at least 1")


@dataclass
class PosteriorMoments:
    """Running mean and covariance of latent draws, one pair per individual."""

    mean: np.ndarray  # (N, K)
    cov: np.ndarray  # (N, K, K)
    count: int = 0

    @classmethod
    def empty(cls, N: int, K: int) -> "PosteriorMoments":
        return cls(np.zeros((N, K)), np.zeros((N, K, K)), 0)


def update_posterior_moments(moments: PosteriorMoments, z_draw, t: int | None = None) -> PosteriorMoments:
    """Online mean/covariance recursion with ``t`` previous draws (default: the count)."""
    t = moments.count if t is None else t
    z = np.asarray(z_draw, dtype=float).reshape(moments.mean.shape)
    d = z - moments.mean
    mean = moments.mean + d / (t + 1)
    cov = t * moments.cov / (t + 1) + t * np.einsum("...i,...j->...ij", d, d) / (t + 1) ** 2
    return PosteriorMoments(mean, cov, t + 1)


def eap_scores(u_draws) -> np.ndarray:
    """Average of post-burn-in draws; ``u_draws`` is (draws, N, K)."""
    u = np.asarray(u_draws, dtype=float)
    if u.shape[0] < 1:
        raise ValueError("need at least one draw")
    return u.mean(axis=0)


@dataclass
class FitResult:
    params: GapmParams | ApmParams
    eap_scores: np.ndarray
    moments: PosteriorMoments
    acceptance_rate: float
    q: QMatrix
    model: str
    config: FitConfig
    loglik_trace: np.ndarray  # summed complete-data log-density per iteration
    checkpoints: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    final_z: np.ndarray | None = None
    nonfinite: int = 0


# ---------------------------------------------------------------------------
# starting values
# ---------------------------------------------------------------------------


def initial_latent(data: Dataset, K: int, rng: np.random.Generator) -> np.ndarray:
    """Normal quantile of each individual's rank in proportion correct, with jitter."""
    score = data.responses.mean(axis=1)
    p = np.clip((rankdata(score) - 0.5) / data.N, 0.01, 0.99)
    z = normal_quantile(p)
    return z[:, None] + 0.1 * rng.standard_normal((data.N, K))


def varimax(loadings, max_iter: int = 100, tol: float = 1e-8) -> np.ndarray:
    """Kaiser's varimax rotation of a p x k loading matrix."""
    A = np.asarray(loadings, dtype=float)
    p, k = A.shape
    R = np.eye(k)
    crit = 0.0
    for _ in range(max_iter):
        L = A @ R
        u, s, vt = np.linalg.svd(A.T @ (L ** 3 - L * (np.sum(L ** 2, axis=0) / p)))
        R = u @ vt
        prev, crit = crit, s.sum()
        if prev and crit < prev * (1 + tol):
            break
    return A @ R


def initial_latent_factors(data: Dataset, K: int, rng: np.random.Generator) -> np.ndarray:
    """Exploratory start: varimax-rotated principal-component scores, rank-normalised, with jitter.

    Each attribute gets its own starting score, which breaks the symmetry of
    the all-ones design.
    """
    Y = data.responses.astype(float)
    sd = Y.std(axis=0)
    Ys = (Y - Y.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
    w, V = np.linalg.eigh(Ys.T @ Ys / data.N)
    order = np.argsort(w)[::-1][:K]
    A = varimax(V[:, order] * np.sqrt(np.maximum(w[order], 0.0)))
    A *= np.where(A.sum(axis=0) < 0, -1.0, 1.0)  # orient so more correct answers mean more mastery
    scores = Ys @ A @ np.linalg.pinv(A.T @ A)
    p = np.clip((rankdata(scores, axis=0) - 0.5) / data.N, 0.01, 0.99)
    return normal_quantile(p) + 0.1 * rng.standard_normal((data.N, K))


def _start(data: Dataset, q: QMatrix, rng) -> np.ndarray:
    if q.exploratory and q.K > 1:
        return initial_latent_factors(data, q.K, rng)
    return initial_latent(data, q.K, rng)


def _check_design(data: Dataset, q: QMatrix):
    if data.J != q.J:
        raise InvalidDesignError(f"responses have {data.J} items but the Q-matrix has {q.J}")


def init_gapm(data: Dataset, q: QMatrix, grid: KnotGrid, rng: np.random.Generator):
    """Identity sieves, equal weights per Q-row, identity correlation."""
    _check_design(data, q)
    e = q.entries.astype(float)
    params = GapmParams(e / e.sum(axis=1, keepdims=True), identity_theta(grid, q.J, q.K),
                        np.eye(q.K), grid)
    return params, _start(data, q, rng)


def init_apm(data: Dataset, q: QMatrix, rng: np.random.Generator, guess: float = 0.1, slip: float = 0.1):
    """Intercept ``guess``; equal slopes so that the slipping level is ``slip``."""
    _check_design(data, q)
    e = q.entries.astype(float)
    slopes = (1.0 - guess - slip) * e / e.sum(axis=1, keepdims=True)
    delta = np.column_stack([np.full(q.J, guess), slopes])
    params = ApmParams(delta, np.zeros(q.K), np.eye(q.K))
    return params, _start(data, q, rng)


# ---------------------------------------------------------------------------
# Polyak-Ruppert accumulation
# ---------------------------------------------------------------------------


class _Average:
    def __init__(self):
        self.sums = None
        self.n = 0

    def add(self, arrays):
        if self.sums is None:
            self.sums = [np.array(a, dtype=float) for a in arrays]
        else:
            for s, a in zip(self.sums, arrays):
                s += a
        self.n += 1

    def mean(self):
        return [s / self.n for s in self.sums]


def _blocks(params):
    if isinstance(params, GapmParams):
        return (params.alpha, params.theta, params.chol)
    return (params.delta, params.mean, params.cov_chol)


def _averaged(avg: _Average, template, q: QMatrix):
    if isinstance(template, GapmParams):
        alpha, theta, chol = avg.mean()
        # convex combinations of simplex points: renormalise away rounding only
        alpha = alpha * q.entries
        alpha /= alpha.sum(axis=1, keepdims=True)
        theta /= theta.sum(axis=-1, keepdims=True)
        chol = np.tril(chol)
        chol /= np.linalg.norm(chol, axis=1, keepdims=True)
        chol[0] = 0.0
        chol[0, 0] = 1.0
        return template.replace(alpha=alpha, theta=theta, chol=chol)
    delta, mean, cov_chol = avg.mean()
    return template.replace(delta=delta, mean=mean, cov_chol=np.tril(cov_chol))


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------


def _iteration_stream(seed: int, t: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, _SA_STREAM, t])


def _chunks(N: int, workers: int):
    bounds = np.linspace(0, N, workers + 1).astype(int)
    return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def _sweep(Y, Z, params, q, h, noise, log_u, pool, parts):
    """Terms at ``Z``, then one Langevin transition per row (possibly threaded)."""

    def run(sl):
        with np.errstate(all="ignore"):
            cur = likelihood.terms(Y[sl], Z[sl], params, q)
        return mala.sweep(Y[sl], cur, params, q, h, noise[sl], log_u[sl])

    if pool is None:
        return run(slice(None))
    results = list(pool.map(run, parts))
    merged = results[0][0]
    if len(results) > 1:
        merged = type(merged)(**{
            k: None if getattr(merged, k) is None
            else np.concatenate([getattr(r[0], k) for r in results])
            for k in merged.__dataclass_fields__
        })
    acc = np.concatenate([r[1] for r in results])
    bad = np.concatenate([r[2] for r in results])
    return merged, acc, bad


def _degenerate_items(data: Dataset):
    col = data.responses.mean(axis=0)
    return [int(j) for j in np.flatnonzero((col == 0) | (col == 1))]


def fit(data: Dataset, q: QMatrix, grid: KnotGrid | None, config: FitConfig, model: str = "gapm") -> FitResult:
    """Run SA-MD for ``config.iterations`` iterations and average after burn-in."""
    if model not in ("gapm", "apm"):
        raise ConfigError(f"unknown model {model!r}")
    if model == "gapm" and grid is None:
        raise ConfigError("the GaPM-CDM needs a knot grid")
    if config.mode == "exploratory" and not np.all(q.entries == 1):
        raise ConfigError("exploratory fits use the all-ones Q-matrix")
    if config.mode == "exploratory":
        q = QMatrix(q.entries, exploratory=True)
    _check_design(data, q)
    N, K = data.N, q.K
    notes = []
    for j in _degenerate_items(data):
        msg = f"item {j} has no response variation"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        notes.append(msg)

    schedule = config.schedule or StepSchedule.default(N, model, config.misspecified)
    h = (config.mala or MalaConfig.default_for(K)).h(K)
    n_steps = (config.mala or MalaConfig.default_for(K)).n_steps
    init_rng = np.random.default_rng([int(config.seed) & 0xFFFFFFFFFFFFFFFF, _INIT_STREAM])
    if model == "gapm":
        params, Z = init_gapm(data, q, grid, init_rng)
    else:
        params, Z = init_apm(data, q, init_rng)
    Y = np.ascontiguousarray(data.responses)

    T, burn = config.iterations, config.burn_in
    every = config.checkpoint_every or max(1, T // 100)
    avg = _Average()
    u_sum = np.zeros((N, K))
    moments = PosteriorMoments.empty(N, K)
    trace = np.empty(T)
    checkpoints = []
    accepts = proposals = nonfinite = 0

    pool = ThreadPoolExecutor(config.threads) if config.threads > 1 else None
    parts = _chunks(N, config.threads)
    try:
        for t in range(1, T + 1):
            stream = _iteration_stream(config.seed, t)
            for _ in range(n_steps):
                noise = stream.standard_normal((N, K))
                log_u = np.log(stream.random(N))
                new, acc, bad = _sweep(Y, Z, params, q, h, noise, log_u, pool, parts)
                Z = new.z
                accepts += int(acc.sum())
                nonfinite += int(bad.sum())
                proposals += N
            grad = likelihood.param_grad(new, params, q)
            trace[t - 1] = new.loglik.sum()
            if model == "gapm":
                params = update_gapm(params, grad, t, schedule, q)
            else:
                params = update_apm(params, grad, schedule.gamma(t, "delta"), schedule.gamma(t, "l"), q)

            if t > burn:
                avg.add(_blocks(params))
                u_sum += new.u
                moments = update_posterior_moments(moments, Z)
            if config.debug and t % 1000 == 0:
                params.validate(q)
            if t % every == 0 or t == T:
                rate = accepts / proposals
                checkpoints.append({"iteration": t, "acceptance": rate, "loglik": float(trace[t - 1]),
                                    "params": params})
                log.info("iter=%d accept=%.4f loglik=%.6f", t, rate, trace[t - 1])
    finally:
        if pool is not None:
            pool.shutdown()

    final = _averaged(avg, params, q)
    return FitResult(
        params=final,
        eap_scores=u_sum / avg.n,
        moments=moments,
        acceptance_rate=accepts / proposals,
        q=q,
        model=model,
        config=config,
        loglik_trace=trace,
        checkpoints=checkpoints,
        warnings=notes,
        final_z=Z,
        nonfinite=nonfinite,
    )


def sample_posterior(data: Dataset, params, q: QMatrix, iterations: int, burn_in: int,
                     mala_config: MalaConfig | None = None, seed: int = 0, z0=None):
    """MALA chains with parameters held fixed; returns ``(moments, eap, acceptance)``.

    Used to build importance-sampling proposals for individuals that took no
    part in the fit (held-out data).
    """
    if not 0 <= burn_in < iterations:
        raise ConfigError("burn-in must be smaller than the number of iterations")
    N, K = data.N, q.K
    cfg = mala_config or MalaConfig.default_for(K)
    h = cfg.h(K)
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, _INIT_STREAM])
    Z = _start(data, q, rng) if z0 is None else np.array(z0, dtype=float)
    if isinstance(params, ApmParams):
        Z = Z * np.sqrt(np.diag(params.sigma)) + params.mean
    Y = np.ascontiguousarray(data.responses)
    with np.errstate(all="ignore"):
        cur = likelihood.terms(Y, Z, params, q)
    moments = PosteriorMoments.empty(N, K)
    u_sum = np.zeros((N, K))
    accepts = 0
    for t in range(1, iterations + 1):
        stream = _iteration_stream(seed, t)
        cur, acc, _ = mala.sweep(Y, cur, params, q, h, stream.standard_normal((N, K)),
                                 np.log(stream.random(N)))
        accepts += int(acc.sum())
        if t > burn_in:
            moments = update_posterior_moments(moments, cur.z)
            u_sum += cur.u
    return moments, u_sum / (iterations - burn_in), accepts / (N * iterations)
