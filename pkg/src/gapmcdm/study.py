"""Desk-scale replications of the simulation studies.

One replication simulates N training and ``n_test`` held-out individuals from
a true GaPM-CDM or aPM-CDM, fits both models on the training part and records
attribute recovery (Spearman), IRF recovery (ISE), the mean squared error of
the correlation entries and the held-out log-likelihood difference D.
Metric values are raw (not multiplied by 100).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from .evaluation import (
    HoldoutConfig,
    _mix,
    align_attributes,
    cv_select_k,
    heldout_loglik,
    ise_items,
    spearman,
)
from .fit import FitConfig, fit
from .formats import KNOT_PRESETS
from .model import ApmParams, KnotGrid, QMatrix, apm_pi, gapm_pi
from .simgen import builtin_q, gen_apm, gen_gapm, make_equicorr


@dataclass(frozen=True)
class StudyConfig:
    truth: str = "gapm"  # generating model
    q: str = "Q3"
    n: int = 1000
    n_test: int = 500
    sigma: float = 0.7
    iterations: int = 20000
    burn_in: int = 10000
    knots: str = "k1"
    exploratory: bool = False  # add an exploratory GaPM fit
    fit_apm: bool = True
    ise_points: int = 2 ** 14
    holdout: HoldoutConfig = HoldoutConfig()


def _recovery(eap, u_true, align: bool):
    K = u_true.shape[1]
    perm = align_attributes(eap, u_true) if align else tuple(range(K))
    return perm, [spearman(eap[:, perm[k]], u_true[:, k]) for k in range(K)]


def _offdiag(m):
    K = m.shape[0]
    return m[np.tril_indices(K, -1)]


def replicate(cfg: StudyConfig, seed: int, r: int, threads: int = 1) -> dict:
    """Run replication ``r``; returns a flat metrics record."""
    rseed = _mix(seed, r)
    q = builtin_q(cfg.q)
    corr = make_equicorr(q.K, cfg.sigma)
    rng = np.random.default_rng([rseed, 0])
    n_all = cfg.n + cfg.n_test
    if cfg.truth == "gapm":
        data_all, truth = gen_gapm(n_all, q, corr, rng)
    elif cfg.truth == "apm":
        data_all, truth = gen_apm(n_all, q, corr, rng)
    else:
        raise ValueError(f"unknown generating model {cfg.truth!r}")
    train = data_all.subset(np.arange(cfg.n))
    test = data_all.subset(np.arange(cfg.n, n_all))
    u_train = truth.u[: cfg.n]
    grid = KnotGrid.from_interior(KNOT_PRESETS[cfg.knots])

    base = FitConfig(cfg.iterations, cfg.burn_in, seed=rseed, threads=threads)
    holdout = replace(cfg.holdout, seed=_mix(rseed, 9))
    rec = {"replication": r, "seed": rseed}

    def score(name, res, q_used, align=False):
        perm, c = _recovery(res.eap_scores, u_train, align)
        params = res.params
        if isinstance(params, ApmParams):
            pi_hat = lambda U: apm_pi(params, q_used, U)  # noqa: E731
        else:
            pi_hat = lambda U: gapm_pi(params, q_used, U)  # noqa: E731
        P = np.asarray(perm)

        def pi_aligned(U):
            # estimated attribute perm[k] plays the role of true attribute k
            V = np.empty_like(U)
            V[:, P] = U
            return pi_hat(V)

        ise = ise_items(pi_aligned, truth.pi, q.K, cfg.ise_points, rng=[rseed, 5])
        if isinstance(params, ApmParams):
            s = params.sigma
            d = np.sqrt(np.diag(s))
            est_corr = s / np.outer(d, d)
        else:
            est_corr = params.sigma
        est_corr = est_corr[np.ix_(P, P)]
        rec.update({
            f"{name}_avc": float(np.mean(c)),
            f"{name}_spearman": [float(v) for v in c],
            f"{name}_avise": float(np.mean(ise)),
            f"{name}_corr_mse": float(np.mean((_offdiag(est_corr) - _offdiag(corr)) ** 2)),
            f"{name}_acceptance": float(res.acceptance_rate),
        })
        if align:
            rec[f"{name}_perm"] = [int(p) for p in perm]
        return res

    g = score("gapm", fit(train, q, grid, base, model="gapm"), q)
    ll_g, se_g = heldout_loglik(test, g.params, q, holdout)
    rec.update(gapm_heldout=ll_g, gapm_heldout_se=se_g)
    if cfg.fit_apm:
        apm_cfg = replace(base, misspecified=cfg.truth != "apm")
        a = score("apm", fit(train, q, None, apm_cfg, model="apm"), q)
        ll_a, se_a = heldout_loglik(test, a.params, q, holdout)
        rec.update(apm_heldout=ll_a, apm_heldout_se=se_a, D=ll_g - ll_a)
    if cfg.exploratory:
        qx = QMatrix.full(q.J, q.K)
        score("exploratory", fit(train, qx, grid, replace(base, mode="exploratory"), model="gapm"), qx,
              align=True)
    return rec


def summarize(records: list) -> dict:
    """Means over replications of every scalar metric."""
    keys = [k for k, v in records[0].items() if isinstance(v, float) and k != "seed"]
    return {k: float(np.mean([rec[k] for rec in records])) for k in keys}


def run_study(cfg: StudyConfig, seed: int, reps: int, threads: int = 1) -> dict:
    records = [replicate(cfg, seed, r, threads) for r in range(reps)]
    cfg_dict = asdict(cfg)
    return {"config": cfg_dict, "records": records, "summary": summarize(records)}


@dataclass(frozen=True)
class CVStudyConfig:
    q: str = "Q3"
    n: int = 1000
    sigma: float = 0.7
    k_candidates: tuple = (2, 3, 4)
    r_splits: int = 5
    iterations: int = 2000
    burn_in: int = 1000
    knots: str = "k2"
    holdout: HoldoutConfig = HoldoutConfig(posterior_iterations=1000, posterior_burn_in=300, m_draws=1000)


def cv_repetition(cfg: CVStudyConfig, seed: int, rep: int, threads: int = 1) -> dict:
    """Simulate one GaPM dataset and cross-validate the number of attributes."""
    rseed = _mix(seed, rep)
    q = builtin_q(cfg.q)
    data, _ = gen_gapm(cfg.n, q, make_equicorr(q.K, cfg.sigma), np.random.default_rng([rseed, 0]))
    grid = KnotGrid.from_interior(KNOT_PRESETS[cfg.knots])
    fc = FitConfig(cfg.iterations, cfg.burn_in, seed=rseed, threads=threads, mode="exploratory")
    res = cv_select_k(data, cfg.k_candidates, cfg.r_splits, fc, grid=grid,
                      holdout=replace(cfg.holdout, seed=rseed), rng=[rseed, 1])
    return {"repetition": rep, "seed": rseed, "k_hat": int(res.k_hat),
            "cve": {str(k): v for k, v in res.mean_loglik.items()},
            "se": {str(k): v for k, v in res.se.items()}}
