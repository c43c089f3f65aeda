"""Recovery metrics, held-out model comparison and cross-validated choice of K."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import qmc, rankdata

from .exceptions import ConfigError, UnsupportedDimensionError
from .fit import FitConfig, fit, sample_posterior
from .mala import MalaConfig
from .marginal_loglik import is_loglik
from .model import Dataset, KnotGrid, QMatrix


def mse(estimates, truth) -> float:
    est = np.asarray(estimates, dtype=float)
    if est.size == 0:
        raise ValueError("mse needs at least one replication")
    return float(np.mean((est - truth) ** 2))


def ise(pi_hat, pi_true, K: int, n_mc: int = 2 ** 14, rng=None) -> float:
    """Integrated squared error over [0, 1]^K on a scrambled Halton point set.

    ``pi_hat`` and ``pi_true`` map an (M, K) array of points to M values.
    """
    pts = qmc.Halton(d=K, scramble=True, seed=np.random.default_rng(rng)).random(n_mc)
    diff = np.asarray(pi_hat(pts), dtype=float) - np.asarray(pi_true(pts), dtype=float)
    return float(np.mean(diff * diff))


def ise_items(pi_hat_all, pi_true_all, K: int, n_mc: int = 2 ** 14, rng=None) -> np.ndarray:
    """Per-item ISE when both callables return (M, J) probability tables."""
    pts = qmc.Halton(d=K, scramble=True, seed=np.random.default_rng(rng)).random(n_mc)
    diff = pi_hat_all(pts) - pi_true_all(pts)
    return np.mean(diff * diff, axis=0)


def spearman(x, y) -> float:
    """Pearson correlation of average ranks."""
    rx = rankdata(np.asarray(x, dtype=float))
    ry = rankdata(np.asarray(y, dtype=float))
    if rx.size < 2 or rx.size != ry.size:
        raise ValueError("spearman needs two equal-length samples of size >= 2")
    dx, dy = rx - rx.mean(), ry - ry.mean()
    denom = np.sqrt(np.dot(dx, dx) * np.dot(dy, dy))
    if denom == 0:
        raise ValueError("rank correlation undefined for a constant sample")
    return float(np.dot(dx, dy) / denom)


def align_attributes(eap, truth_u) -> tuple:
    """Permutation ``perm`` maximising sum_k spearman(eap[:, perm[k]], truth_u[:, k])."""
    eap = np.asarray(eap)
    truth_u = np.asarray(truth_u)
    K = truth_u.shape[1]
    if K > 8:
        raise UnsupportedDimensionError("exhaustive alignment is limited to K <= 8")
    C = np.array([[spearman(eap[:, a], truth_u[:, b]) for b in range(K)] for a in range(K)])
    best, best_score = None, -np.inf
    for perm in itertools.permutations(range(K)):
        score = sum(C[perm[k], k] for k in range(K))
        if score > best_score:
            best, best_score = perm, score
    return best


# ---------------------------------------------------------------------------
# held-out log-likelihood
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HoldoutConfig:
    """Settings for scoring a fitted model on data it has not seen.

    Held-out individuals get proposal moments from MALA chains run with the
    fitted parameters held fixed.
    """

    posterior_iterations: int = 2000
    posterior_burn_in: int = 500
    m_draws: int = 2000
    seed: int = 0
    mala: MalaConfig | None = None


def heldout_loglik(test: Dataset, params, q: QMatrix, cfg: HoldoutConfig):
    """Return ``(loglik, se)`` of ``params`` on ``test``."""
    moments, _, _ = sample_posterior(test, params, q, cfg.posterior_iterations, cfg.posterior_burn_in,
                                     cfg.mala, seed=cfg.seed)
    ll, se = is_loglik(test, params, q, moments, cfg.m_draws, rng=np.random.default_rng([cfg.seed, 7]))
    return ll, float(np.sqrt(np.sum(se ** 2)))


def holdout_d(train: Dataset, test: Dataset, q: QMatrix, grid: KnotGrid,
              gapm_config: FitConfig, apm_config: FitConfig, holdout: HoldoutConfig = HoldoutConfig()):
    """Fit both models on ``train``; return the held-out log-likelihood difference.

    Positive values favour the GaPM-CDM.  The second element of the return
    value holds the two fits and the per-model log-likelihoods.
    """
    g = fit(train, q, grid, gapm_config, model="gapm")
    a = fit(train, q, None, apm_config, model="apm")
    ll_g, se_g = heldout_loglik(test, g.params, q, holdout)
    ll_a, se_a = heldout_loglik(test, a.params, q, holdout)
    return ll_g - ll_a, {"gapm": g, "apm": a, "loglik_gapm": ll_g, "loglik_apm": ll_a,
                         "se": float(np.hypot(se_g, se_a))}


# ---------------------------------------------------------------------------
# cross-validation over the number of attributes
# ---------------------------------------------------------------------------


@dataclass
class CVResult:
    k_candidates: list
    mean_loglik: dict  # K -> mean held-out log-likelihood over splits
    se: dict  # K -> standard error of that mean over splits
    k_hat: int
    split_logliks: dict = field(default_factory=dict)  # K -> list per split


def random_split(N: int, fraction: float, rng: np.random.Generator):
    """Training and test row indices, drawn without replacement."""
    if not 0 < fraction < 1:
        raise ConfigError("split fraction must lie in (0, 1)")
    perm = rng.permutation(N)
    n_train = int(round(fraction * N))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def cv_select_k(data: Dataset, k_candidates, r_splits: int, fit_config: FitConfig,
                grid: KnotGrid | None = None, split_fraction: float = 0.8,
                holdout: HoldoutConfig = HoldoutConfig(), model: str = "gapm", rng=None) -> CVResult:
    """Exploratory fits for each K on repeated random splits; pick the best test log-likelihood."""
    ks = list(k_candidates)
    if not ks:
        raise ConfigError("need at least one candidate K")
    rng = np.random.default_rng(rng)
    splits = [random_split(data.N, split_fraction, rng) for _ in range(r_splits)]
    per_k = {k: [] for k in ks}
    for r, (tr, te) in enumerate(splits):
        for k in ks:
            q = QMatrix.full(data.J, k)
            cfg = replace(fit_config, mode="exploratory", seed=_mix(fit_config.seed, r, k))
            res = fit(data.subset(tr), q, grid, cfg, model=model)
            ll, _ = heldout_loglik(data.subset(te), res.params, q,
                                   replace(holdout, seed=_mix(holdout.seed, r, k)))
            per_k[k].append(ll)
    means = {k: float(np.mean(v)) for k, v in per_k.items()}
    ses = {k: float(np.std(v, ddof=1) / np.sqrt(len(v))) if len(v) > 1 else float("nan")
           for k, v in per_k.items()}
    k_hat = max(ks, key=lambda k: means[k])
    return CVResult(ks, means, ses, k_hat, per_k)


def _mix(seed: int, *keys: int) -> int:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *keys])
    return int(ss.generate_state(1, dtype=np.uint64)[0])
