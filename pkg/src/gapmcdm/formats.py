"""File formats shared by the command-line tools.

CSV files are comma-separated and may start with ``#`` comment lines; the
writers put the seed and a configuration digest there.  JSON files carry the
same information under a top-level ``"meta"`` object, because JSON has no
comment syntax.  Floats are written with Python's shortest round-trip
representation, so loading and re-writing a file reproduces it byte for byte.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .exceptions import InvalidDesignError
from .fit import PosteriorMoments
from .model import ApmParams, Dataset, GapmParams, KnotGrid, QMatrix

KNOT_PRESETS = {
    "k1": tuple(round(0.05 * i, 10) for i in range(1, 20)),
    "k0": (0.05,) + tuple(round(0.1 * i, 10) for i in range(1, 10)) + (0.95,),
    "k2": tuple(round(0.1 * i, 10) for i in range(1, 10)),
    "ecpe": (0.025, 0.05) + tuple(round(0.1 * i, 10) for i in range(1, 10)) + (0.95, 0.975),
}


def parse_knots(spec: str) -> KnotGrid:
    """A preset name (k1, k0, k2, ecpe) or a comma-separated list of interior knots."""
    if spec in KNOT_PRESETS:
        return KnotGrid.from_interior(KNOT_PRESETS[spec])
    try:
        knots = [float(s) for s in spec.split(",") if s.strip()]
    except ValueError as exc:
        raise InvalidDesignError(f"cannot parse knots {spec!r}") from exc
    return KnotGrid.from_interior(knots)


def config_digest(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def meta(seed, config: dict) -> dict:
    return {"seed": seed, "config_digest": config_digest(config)}


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def _header(m: dict | None) -> str:
    if m is None:
        return ""
    return f"# seed={m['seed']} config_digest={m['config_digest']}\n"


def write_int_csv(path, table, m: dict | None = None, columns=None) -> None:
    table = np.asarray(table)
    lines = [_header(m)]
    if columns is not None:
        lines.append(",".join(columns) + "\n")
    lines.extend(",".join(str(int(v)) for v in row) + "\n" for row in table)
    Path(path).write_text("".join(lines))


def write_float_csv(path, table, m: dict | None = None, columns=None) -> None:
    table = np.atleast_2d(np.asarray(table, dtype=float))
    lines = [_header(m)]
    if columns is not None:
        lines.append(",".join(columns) + "\n")
    lines.extend(",".join(repr(float(v)) for v in row) + "\n" for row in table)
    Path(path).write_text("".join(lines))


def read_csv(path, dtype=float) -> np.ndarray:
    """Numeric CSV; ``#`` comments and a single non-numeric header line are skipped."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        cells = [c.strip() for c in line.split(",")]
        try:
            rows.append([float(c) for c in cells])
        except ValueError:
            if rows:
                raise InvalidDesignError(f"{path}:{lineno}: non-numeric value")
            continue  # header
    if not rows:
        raise InvalidDesignError(f"{path} holds no data rows")
    if len({len(r) for r in rows}) != 1:
        raise InvalidDesignError(f"{path}: rows have different lengths")
    arr = np.array(rows)
    if dtype is int:
        if np.any(arr != np.round(arr)):
            raise InvalidDesignError(f"{path}: expected integers")
        return arr.astype(np.int64)
    return arr


def read_responses(path) -> Dataset:
    return Dataset(read_csv(path, dtype=int))


def read_q(path) -> QMatrix:
    return QMatrix(read_csv(path, dtype=int))


# ---------------------------------------------------------------------------
# JSON
# ---------------------------------------------------------------------------


def dumps(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(dumps(obj))


def read_json(path) -> dict:
    return json.loads(Path(path).read_text())


def _lists(a) -> list:
    return np.asarray(a, dtype=float).tolist()


def params_to_dict(params, q: QMatrix, m: dict | None = None) -> dict:
    """Documented parameter bundle.

    GaPM: ``breakpoints`` (0, knots, 1), ``alpha`` (J x K), ``theta``
    (J x K x S increments), ``chol`` and ``sigma`` (K x K).  aPM: ``delta``
    (J x (K+1), intercept first), ``mean``, ``cov_chol`` and ``sigma``.
    Both carry the Q-matrix and whether the fit was exploratory.
    """
    out = {"q": q.entries.astype(int).tolist(), "exploratory": bool(q.exploratory)}
    if isinstance(params, GapmParams):
        out.update(model="gapm", breakpoints=_lists(params.grid.breakpoints), alpha=_lists(params.alpha),
                   theta=_lists(params.theta), chol=_lists(params.chol), sigma=_lists(params.sigma))
    elif isinstance(params, ApmParams):
        out.update(model="apm", delta=_lists(params.delta), mean=_lists(params.mean),
                   cov_chol=_lists(params.cov_chol), sigma=_lists(params.sigma))
    else:
        raise TypeError(f"unsupported parameter type {type(params).__name__}")
    if m is not None:
        out["meta"] = m
    return out


def params_from_dict(d: dict):
    """Inverse of :func:`params_to_dict`; returns ``(params, q)``."""
    try:
        q = QMatrix(np.array(d["q"]), exploratory=bool(d.get("exploratory", False)))
        if d["model"] == "gapm":
            params = GapmParams(np.array(d["alpha"]), np.array(d["theta"]), np.array(d["chol"]),
                                KnotGrid(np.array(d["breakpoints"])))
        elif d["model"] == "apm":
            params = ApmParams(np.array(d["delta"]), np.array(d["mean"]), np.array(d["cov_chol"]))
        else:
            raise InvalidDesignError(f"unknown model {d['model']!r}")
    except KeyError as exc:
        raise InvalidDesignError(f"parameter file lacks field {exc}") from exc
    return params, q


def moments_to_dict(moments: PosteriorMoments, m: dict | None = None) -> dict:
    out = {"count": int(moments.count), "mean": _lists(moments.mean), "cov": _lists(moments.cov)}
    if m is not None:
        out["meta"] = m
    return out


def moments_from_dict(d: dict) -> PosteriorMoments:
    return PosteriorMoments(np.array(d["mean"], dtype=float), np.array(d["cov"], dtype=float), int(d["count"]))
