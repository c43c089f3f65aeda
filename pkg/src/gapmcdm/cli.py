"""Command-line front end.

Subcommands: simulate, fit, marglik, eval, cv, irf-grid, study, cv-study.
Exit status is 0 on success, 2 for usage or validation errors and 3 for
numerical failures.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import formats
from .evaluation import HoldoutConfig, align_attributes, cv_select_k, heldout_loglik, ise_items, spearman
from .exceptions import DegenerateUpdateError, GapmError, NumericalError
from .fit import FitConfig, fit, sample_posterior
from .mala import MalaConfig
from .marginal_loglik import is_loglik
from .model import ApmParams, GapmParams, QMatrix, apm_pi, gapm_pi
from .simgen import BETA_SHAPES, ApmTruth, GapmTruth, builtin_q, gen_apm, gen_gapm, make_equicorr
from .study import CVStudyConfig, StudyConfig, cv_repetition, run_study

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("gapmcdm")


def _out_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _config(args, drop=("out", "func", "threads", "verbose", "validate")) -> dict:
    # flags that cannot change any output value stay out of the digest
    return {k: v for k, v in sorted(vars(args).items()) if k not in drop}


def _load_q(spec: str) -> QMatrix:
    if spec.startswith("builtin:"):
        return builtin_q(spec.split(":", 1)[1])
    return formats.read_q(spec)


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def truth_to_dict(truth, m) -> dict:
    out = {"q": truth.q.entries.astype(int).tolist(), "corr": truth.corr.tolist(), "meta": m}
    if isinstance(truth, GapmTruth):
        out.update(model="gapm", weights=truth.weights.tolist(), shape_index=truth.shapes.astype(int).tolist(),
                   beta_shapes=[list(s) for s in BETA_SHAPES])
    else:
        out.update(model="apm", delta=truth.delta.tolist(), slip=truth.slip.tolist(), mean=truth.mean.tolist())
    return out


def truth_from_dict(d: dict):
    q = QMatrix(np.array(d["q"]))
    corr = np.array(d["corr"], dtype=float)
    if d["model"] == "gapm":
        return GapmTruth(q, np.array(d["weights"]), np.array(d["shape_index"]), corr, None)
    return ApmTruth(q, np.array(d["delta"]), np.array(d["slip"]), np.array(d["mean"]), corr, None)


def cmd_simulate(args) -> int:
    q = _load_q(args.q)
    corr = make_equicorr(q.K, args.sigma)
    rng = np.random.default_rng(args.seed)
    gen = gen_gapm if args.model == "gapm" else gen_apm
    data, truth = gen(args.n, q, corr, rng)
    m = formats.meta(args.seed, _config(args))
    out = _out_dir(args.out)
    formats.write_int_csv(out / "responses.csv", data.responses, m)
    formats.write_int_csv(out / "q.csv", q.entries, m)
    formats.write_float_csv(out / "u_true.csv", truth.u, m)
    formats.write_json(out / "truth.json", truth_to_dict(truth, m))
    return EXIT_OK


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------


def _design(args, J: int) -> QMatrix:
    if args.exploratory:
        if args.k is None:
            raise GapmError("--exploratory needs --k")
        return QMatrix.full(J, args.k)
    if args.q is None:
        raise GapmError("give --q or --exploratory --k K")
    return _load_q(args.q)


def cmd_fit(args) -> int:
    data = formats.read_responses(args.responses)
    q = _design(args, data.J)
    grid = formats.parse_knots(args.knots) if args.model == "gapm" else None
    burn = args.burn_in if args.burn_in is not None else args.iterations // 2
    mala_cfg = MalaConfig(step=args.step) if args.step is not None else None
    cfg = FitConfig(args.iterations, burn, mala=mala_cfg, seed=args.seed,
                    mode="exploratory" if args.exploratory else "confirmatory",
                    threads=args.threads, misspecified=args.misspecified)
    res = fit(data, q, grid, cfg, model=args.model)
    m = formats.meta(args.seed, _config(args))
    out = _out_dir(args.out)
    formats.write_json(out / "params.json", formats.params_to_dict(res.params, q, m))
    formats.write_float_csv(out / "scores.csv", res.eap_scores, m,
                            columns=[f"U{k + 1}" for k in range(q.K)])
    formats.write_json(out / "moments.json", formats.moments_to_dict(res.moments, m))
    lines = [f"# seed={m['seed']} config_digest={m['config_digest']}"]
    for c in res.checkpoints:
        lines.append(f"iter={c['iteration']} accept={c['acceptance']:.4f} loglik={c['loglik']:.6f}")
    lines.append(f"final accept={res.acceptance_rate:.4f} nonfinite={res.nonfinite}")
    lines.extend(f"warning {w}" for w in res.warnings)
    (out / "fit_log.txt").write_text("\n".join(lines) + "\n")
    if args.validate:
        text = (out / "params.json").read_text()
        params, q2 = formats.params_from_dict(formats.read_json(out / "params.json"))
        params.validate(q2)
        if formats.dumps(formats.params_to_dict(params, q2, m)) != text:
            raise GapmError("params.json does not round-trip")
        print("params.json: valid")
    return EXIT_OK


# ---------------------------------------------------------------------------
# marglik
# ---------------------------------------------------------------------------


def cmd_marglik(args) -> int:
    data = formats.read_responses(args.responses)
    params, q = formats.params_from_dict(formats.read_json(args.params))
    if args.moments:
        moments = formats.moments_from_dict(formats.read_json(args.moments))
    else:
        moments, _, _ = sample_posterior(data, params, q, args.posterior_iterations,
                                         args.posterior_iterations // 4, seed=args.seed)
    if moments.mean.shape != (data.N, q.K):
        raise GapmError("moments do not match the response file")
    ll, se = is_loglik(data, params, q, moments, args.m_draws, rng=np.random.default_rng([args.seed, 7]))
    out = {"loglik": ll, "se": float(np.sqrt(np.sum(se ** 2))), "per_unit_se": se.tolist(),
           "meta": formats.meta(args.seed, _config(args))}
    formats.write_json(args.out, out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _pi_closure(params, q):
    if isinstance(params, ApmParams):
        return lambda U: apm_pi(params, q, U)
    return lambda U: gapm_pi(params, q, U)


def _corr(params):
    s = params.sigma
    d = np.sqrt(np.diag(s))
    return s / np.outer(d, d)


def cmd_eval(args) -> int:
    params, q = formats.params_from_dict(formats.read_json(args.params))
    truth = truth_from_dict(formats.read_json(args.truth))
    K = q.K
    metrics = {"meta": formats.meta(args.seed, _config(args))}
    perm = tuple(range(K))
    if args.scores and args.u_true:
        eap = formats.read_csv(args.scores)
        u = formats.read_csv(args.u_true)
        if q.exploratory or args.align:
            perm = align_attributes(eap, u)
        metrics["permutation"] = [int(p) for p in perm]
        c = [spearman(eap[:, perm[k]], u[:, k]) for k in range(K)]
        metrics["spearman"] = c
        metrics["avc"] = float(np.mean(c))
    P = np.asarray(perm)
    pi_hat = _pi_closure(params, q)

    def aligned(U):
        V = np.empty_like(U)
        V[:, P] = U
        return pi_hat(V)

    ise = ise_items(aligned, truth.pi, K, args.n_mc, rng=args.seed)
    metrics["ise"] = ise.tolist()
    metrics["avise"] = float(np.mean(ise))
    tri = np.tril_indices(K, -1)
    metrics["corr_mse"] = float(np.mean((_corr(params)[np.ix_(P, P)][tri] - truth.corr[tri]) ** 2)) if K > 1 else 0.0
    if args.compare:
        if not args.test:
            raise GapmError("--compare needs --test responses")
        test = formats.read_responses(args.test)
        other, q_other = formats.params_from_dict(formats.read_json(args.compare))
        hc = HoldoutConfig(m_draws=args.m_draws, seed=args.seed)
        ll_a, se_a = heldout_loglik(test, params, q, hc)
        ll_b, se_b = heldout_loglik(test, other, q_other, hc)
        metrics.update(heldout=ll_a, heldout_compare=ll_b, D=ll_a - ll_b, D_se=float(np.hypot(se_a, se_b)))
    formats.write_json(args.out, metrics)
    return EXIT_OK


# ---------------------------------------------------------------------------
# cv
# ---------------------------------------------------------------------------


def cmd_cv(args) -> int:
    data = formats.read_responses(args.responses)
    ks = [int(k) for k in args.k_candidates.split(",") if k.strip()]
    grid = formats.parse_knots(args.knots) if args.model == "gapm" else None
    burn = args.burn_in if args.burn_in is not None else args.iterations // 2
    cfg = FitConfig(args.iterations, burn, seed=args.seed, threads=args.threads, mode="exploratory")
    hc = HoldoutConfig(posterior_iterations=args.posterior_iterations,
                       posterior_burn_in=args.posterior_iterations // 4, m_draws=args.m_draws, seed=args.seed)
    res = cv_select_k(data, ks, args.splits, cfg, grid=grid, split_fraction=args.split_fraction,
                      holdout=hc, model=args.model, rng=[args.seed, 1])
    out = {"k_candidates": ks, "cve": {str(k): res.mean_loglik[k] for k in ks},
           "se": {str(k): res.se[k] for k in ks},
           "split_loglik": {str(k): res.split_logliks[k] for k in ks},
           "k_hat": int(res.k_hat), "meta": formats.meta(args.seed, _config(args))}
    formats.write_json(args.out, out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# irf-grid
# ---------------------------------------------------------------------------


def irf_lattice(params, q: QMatrix, j: int, res: int):
    """Rows of (U..., pi) for item ``j``: a full lattice when K <= 2, else per-attribute profiles."""
    axis = np.linspace(0.0, 1.0, res)
    K = q.K
    pi = _pi_closure(params, q)
    if K <= 2:
        mesh = np.meshgrid(*([axis] * K), indexing="ij")
        U = np.stack([m.ravel() for m in mesh], axis=1)
        return [f"U{k + 1}" for k in range(K)] + ["pi"], np.column_stack([U, pi(U)[:, j]])
    rows = []
    for k in range(K):
        U = np.full((res, K), 0.5)
        U[:, k] = axis
        rows.append(np.column_stack([np.full(res, k + 1), U, pi(U)[:, j]]))
    return ["attribute"] + [f"U{k + 1}" for k in range(K)] + ["pi"], np.vstack(rows)


def cmd_irf_grid(args) -> int:
    params, q = formats.params_from_dict(formats.read_json(args.params))
    if args.grid_res < 2:
        raise GapmError("--grid-res must be at least 2")
    out = _out_dir(args.out)
    m = formats.meta(args.seed, _config(args))
    for j in range(q.J):
        cols, table = irf_lattice(params, q, j, args.grid_res)
        formats.write_float_csv(out / f"irf_item{j + 1:03d}.csv", table, m, columns=cols)
    return EXIT_OK


# ---------------------------------------------------------------------------
# study harnesses
# ---------------------------------------------------------------------------


def cmd_study(args) -> int:
    cfg = StudyConfig(truth=args.truth, q=args.q, n=args.n, n_test=args.n_test, sigma=args.sigma,
                      iterations=args.iterations, burn_in=args.burn_in, knots=args.knots,
                      exploratory=args.exploratory, fit_apm=not args.no_apm)
    result = run_study(cfg, args.seed, args.reps, threads=args.threads)
    result["meta"] = formats.meta(args.seed, asdict(cfg))
    formats.write_json(args.out, result)
    return EXIT_OK


def cmd_cv_study(args) -> int:
    cfg = CVStudyConfig(q=args.q, n=args.n, sigma=args.sigma,
                        k_candidates=tuple(int(k) for k in args.k_candidates.split(",")),
                        r_splits=args.splits, iterations=args.iterations, burn_in=args.burn_in, knots=args.knots)
    reps = [cv_repetition(cfg, args.seed, r, threads=args.threads) for r in range(args.reps)]
    out = {"config": asdict(cfg), "repetitions": reps, "k_hat": [r["k_hat"] for r in reps],
           "meta": formats.meta(args.seed, asdict(cfg))}
    formats.write_json(args.out, out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gapmcdm", description="Partial-mastery cognitive diagnosis models")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True, threads=False):
        if seed:
            p.add_argument("--seed", type=int, default=0)
        if threads:
            p.add_argument("--threads", type=int, default=1, help="worker threads; never changes results")

    p = sub.add_parser("simulate", help="simulate a dataset and its truth bundle")
    p.add_argument("--model", choices=("gapm", "apm"), default="gapm")
    p.add_argument("--q", default="builtin:Q3", help="builtin:Q3, builtin:Q5 or a q.csv path")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--sigma", type=float, default=0.7)
    p.add_argument("--out", default=".")
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit a model by SA-MD")
    p.add_argument("--responses", required=True)
    p.add_argument("--q")
    p.add_argument("--exploratory", action="store_true")
    p.add_argument("--k", type=int)
    p.add_argument("--model", choices=("gapm", "apm"), default="gapm")
    p.add_argument("--knots", default="k1", help="k1, k0, k2, ecpe or comma-separated interior knots")
    p.add_argument("--iterations", type=int, default=20000)
    p.add_argument("--burn-in", type=int)
    p.add_argument("--step", type=float, help="MALA step h (default by K)")
    p.add_argument("--misspecified", action="store_true", help="damped aPM step constants")
    p.add_argument("--validate", action="store_true", help="reload params.json and check every constraint")
    p.add_argument("--out", default=".")
    common(p, threads=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("marglik", help="importance-sampling marginal log-likelihood")
    p.add_argument("--responses", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--moments", help="moments.json; otherwise run frozen-parameter chains")
    p.add_argument("--m-draws", type=int, default=2000)
    p.add_argument("--posterior-iterations", type=int, default=2000)
    p.add_argument("--out", default="marglik.json")
    common(p)
    p.set_defaults(func=cmd_marglik)

    p = sub.add_parser("eval", help="recovery metrics against a truth bundle")
    p.add_argument("--params", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--scores")
    p.add_argument("--u-true")
    p.add_argument("--align", action="store_true", help="match attributes by Spearman before scoring")
    p.add_argument("--compare", help="second params.json for the held-out difference D")
    p.add_argument("--test", help="held-out responses.csv for D")
    p.add_argument("--m-draws", type=int, default=2000)
    p.add_argument("--n-mc", type=int, default=2 ** 14)
    p.add_argument("--out", default="metrics.json")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cv", help="cross-validate the number of attributes")
    p.add_argument("--responses", required=True)
    p.add_argument("--k-candidates", default="2,3,4")
    p.add_argument("--splits", type=int, default=5)
    p.add_argument("--split-fraction", type=float, default=0.8)
    p.add_argument("--model", choices=("gapm", "apm"), default="gapm")
    p.add_argument("--knots", default="k2")
    p.add_argument("--iterations", type=int, default=2000)
    p.add_argument("--burn-in", type=int)
    p.add_argument("--posterior-iterations", type=int, default=1000)
    p.add_argument("--m-draws", type=int, default=1000)
    p.add_argument("--out", default="cve.json")
    common(p, threads=True)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("irf-grid", help="tabulate fitted IRFs on a lattice")
    p.add_argument("--params", required=True)
    p.add_argument("--grid-res", type=int, default=41)
    p.add_argument("--out", default="irf")
    common(p)
    p.set_defaults(func=cmd_irf_grid)

    p = sub.add_parser("study", help="replicated simulation study (both models)")
    p.add_argument("--truth", choices=("gapm", "apm"), default="gapm")
    p.add_argument("--q", default="Q3")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--n-test", type=int, default=500)
    p.add_argument("--sigma", type=float, default=0.7)
    p.add_argument("--iterations", type=int, default=20000)
    p.add_argument("--burn-in", type=int, default=10000)
    p.add_argument("--knots", default="k1")
    p.add_argument("--exploratory", action="store_true", help="also fit an exploratory GaPM")
    p.add_argument("--no-apm", action="store_true")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--out", default="metrics.json")
    common(p, threads=True)
    p.set_defaults(func=cmd_study)

    p = sub.add_parser("cv-study", help="repeated cross-validation of K on simulated data")
    p.add_argument("--q", default="Q3")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--sigma", type=float, default=0.7)
    p.add_argument("--k-candidates", default="2,3,4")
    p.add_argument("--splits", type=int, default=5)
    p.add_argument("--iterations", type=int, default=2000)
    p.add_argument("--burn-in", type=int, default=1000)
    p.add_argument("--knots", default="k2")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--out", default="cve_study.json")
    common(p, threads=True)
    p.set_defaults(func=cmd_cv_study)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (NumericalError, DegenerateUpdateError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (GapmError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    raise SystemExit(main())
