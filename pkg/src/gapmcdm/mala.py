"""Metropolis-adjusted Langevin sampling of the per-individual latent posterior.

The target for individual i is f(y_i, z) on the Gaussian scale.  A proposal
``z* = z + h grad log f(y_i, z) + sqrt(2h) xi`` is accepted with the usual
Metropolis-Hastings ratio including the asymmetric Langevin kernel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import likelihood
from .exceptions import ConfigError
from .likelihood import LatentPoint, Terms


@dataclass(frozen=True)
class MalaConfig:
    """Discretisation step ``h``, given directly or as ``mu_z * K**(-1/3)``."""

    step: float | None = None
    mu_z: float | None = None
    n_steps: int = 1

    def __post_init__(self):
        if (self.step is None) == (self.mu_z is None):
            raise ConfigError("give exactly one of step or mu_z")
        if (self.step if self.step is not None else self.mu_z) <= 0:
            raise ConfigError("MALA step must be positive")
        if self.n_steps < 1:
            raise ConfigError("n_steps must be at least 1")

    def h(self, K: int) -> float:
        if self.step is not None:
            return float(self.step)
        return float(self.mu_z) * K ** (-1.0 / 3.0)

    @classmethod
    def default_for(cls, K: int) -> "MalaConfig":
        # 0.2 for three attributes, 0.1 for five; linear in between
        if K <= 3:
            return cls(step=0.2)
        if K >= 5:
            return cls(step=0.1)
        return cls(step=0.15)


@dataclass(frozen=True)
class ChainState:
    point: LatentPoint
    proposals: int = 0
    accepts: int = 0
    nonfinite: int = 0

    def __post_init__(self):
        if self.accepts > self.proposals:
            raise ValueError("accepts cannot exceed proposals")

    @property
    def acceptance_rate(self) -> float:
        return self.accepts / self.proposals if self.proposals else float("nan")


def propose(z, drift, h: float, noise):
    """Euler-Maruyama step of the Langevin diffusion."""
    z = np.asarray(z, dtype=float)
    return z + h * np.asarray(drift) + math.sqrt(2.0 * h) * np.asarray(noise)


def log_kernel(z_to, z_from, drift_from, h: float):
    """log q_h(z_to | z_from); vectorised over leading axes."""
    z_to = np.asarray(z_to, dtype=float)
    resid = z_to - np.asarray(z_from) - h * np.asarray(drift_from)
    K = z_to.shape[-1]
    return -0.5 * K * math.log(4.0 * math.pi * h) - np.sum(resid * resid, axis=-1) / (4.0 * h)


def log_accept_ratio(cur: Terms, prop: Terms, h: float):
    """Log Metropolis-Hastings ratio for a batch of Langevin proposals."""
    fwd = log_kernel(prop.z, cur.z, cur.grad_z, h)
    bwd = log_kernel(cur.z, prop.z, prop.grad_z, h)
    with np.errstate(invalid="ignore", over="ignore"):
        return (prop.loglik + bwd) - (cur.loglik + fwd)


def sweep(Y, cur: Terms, params, q, h: float, noise, log_u):
    """One Langevin transition for every row; returns ``(terms, accepted, nonfinite)``.

    ``cur`` must hold the terms of the current points under ``params``.
    Proposals with a non-finite ratio are rejected and flagged.
    """
    z_new = propose(cur.z, cur.grad_z, h, noise)
    with np.errstate(all="ignore"):
        prop = likelihood.terms(Y, z_new, params, q)
        ratio = log_accept_ratio(cur, prop, h)
    bad = ~np.isfinite(ratio)
    accepted = ~bad & (log_u < ratio)
    return cur.where(accepted, prop), accepted, bad


def mala_step(state: ChainState, y_row, params, q, config: MalaConfig, rng) -> ChainState:
    """Advance a single chain by ``config.n_steps`` transitions."""
    Y = np.asarray(y_row)[None, :]
    z = np.asarray(state.point.z, dtype=float)[None, :]
    h = config.h(z.shape[1])
    with np.errstate(all="ignore"):
        cur = likelihood.terms(Y, z, params, q)
    proposals, accepts, nonfinite = state.proposals, state.accepts, state.nonfinite
    for _ in range(config.n_steps):
        noise = rng.standard_normal(z.shape)
        log_u = np.log(rng.random(1))
        cur, acc, bad = sweep(Y, cur, params, q, h, noise, log_u)
        proposals += 1
        accepts += int(acc[0])
        nonfinite += int(bad[0])
    return replace(state, point=LatentPoint(cur.z[0].copy(), cur.u[0].copy()),
                   proposals=proposals, accepts=accepts, nonfinite=nonfinite)
