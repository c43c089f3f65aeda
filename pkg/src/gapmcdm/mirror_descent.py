"""Closed-form mirror-descent updates on simplexes and unit spheres.

Gradients are of the log-likelihood, so every update is an ascent step.
Simplex blocks use the negative-entropy geometry (exponentiated gradient);
rows of the Cholesky factor use the Euclidean geometry followed by
projection back onto the unit sphere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigError, DegenerateUpdateError, DomainError, InvalidStateError
from .model import DIAG_FLOOR, ApmParams, GapmParams, ItemWeights, QMatrix

# Cap on a single exponentiated-gradient exponent.  Regular SA-MD steps stay
# well below it; it only stops a 1/theta-type gradient spike from sending a
# simplex to a vertex in one iteration.
STEP_CAP = 5.0


@dataclass(frozen=True)
class StepSchedule:
    """Per-block constants of the decaying step ``mu * t**(-0.5 - epsilon)``."""

    mu_alpha: float = 1e-3
    mu_theta: float = 1e-3
    mu_l: float = 1e-3
    mu_delta: float = 1e-3
    epsilon: float = 0.01

    def __post_init__(self):
        for name in ("mu_alpha", "mu_theta", "mu_l", "mu_delta"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if not 0 < self.epsilon < 0.5:
            raise ConfigError("epsilon must lie in (0, 0.5)")

    @classmethod
    def default(cls, n: int, model: str = "gapm", misspecified: bool = False) -> "StepSchedule":
        """Constants scaled by the sample size.

        GaPM: every block 1/N.  aPM: 1/N, or 0.3/N for the intercept/slope and
        covariance blocks when the aPM is expected to be misspecified.
        """
        base = 1.0 / n
        if model == "apm" and misspecified:
            return cls(mu_alpha=base, mu_theta=base, mu_l=0.3 * base, mu_delta=0.3 * base)
        return cls(mu_alpha=base, mu_theta=base, mu_l=base, mu_delta=base)

    def gamma(self, t: int, block: str) -> float:
        return step_size(t, getattr(self, "mu_" + block), self.epsilon)


def step_size(t: int, mu: float, epsilon: float = 0.01) -> float:
    if t < 1:
        raise DomainError("step index starts at 1")
    return mu * t ** (-0.5 - epsilon)


def exponentiated_gradient(x, grad, gamma, mask=None, max_step=None):
    """Entropic mirror step along the last axis; masked-out entries stay zero.

    The update is carried out in log space so that underflowed entries can
    never be the only ones left.  ``max_step`` caps |gamma * grad| per entry.
    """
    x = np.asarray(x, dtype=float)
    step = gamma * np.asarray(grad, dtype=float)
    if np.any(np.isnan(step)):
        raise InvalidStateError("mirror step received a NaN gradient")
    if max_step is not None:
        step = np.clip(step, -max_step, max_step)
    with np.errstate(divide="ignore"):
        v = np.log(x) + step
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        v = np.where(mask, v, -np.inf)
    top = np.max(v, axis=-1, keepdims=True)
    if np.any(~np.isfinite(top)):
        raise InvalidStateError("no admissible mass left on the simplex")
    y = np.exp(v - top)
    return y / y.sum(axis=-1, keepdims=True)


def update_weights(alpha, grad, gamma: float, q_row) -> ItemWeights:
    a = alpha.alpha if isinstance(alpha, ItemWeights) else alpha
    return ItemWeights(exponentiated_gradient(a, grad, gamma, np.asarray(q_row, dtype=bool)))


def update_theta(theta, grad, gamma: float) -> np.ndarray:
    return exponentiated_gradient(theta, grad, gamma)


def _project_row(v):
    norm = np.linalg.norm(v)
    if norm < 1e-12:
        raise DegenerateUpdateError("Cholesky row update collapsed to zero")
    v = v / norm
    if v[-1] < DIAG_FLOOR:
        off = v[:-1]
        off_norm = np.linalg.norm(off)
        v = np.append(off * (np.sqrt(1.0 - DIAG_FLOOR ** 2) / off_norm), DIAG_FLOOR)
    return v


def update_chol_row(row, grad, gamma: float) -> np.ndarray:
    """Gradient step on the free part of a Cholesky row, then unit-norm projection.

    ``row`` holds the entries up to and including the diagonal.
    """
    row = np.asarray(row, dtype=float)
    return _project_row(row + gamma * np.asarray(grad, dtype=float))


def update_chol(L, dL, gamma: float) -> np.ndarray:
    """Apply :func:`update_chol_row` to rows 2..K; the first row stays (1, 0, ...)."""
    L = np.array(L, dtype=float)
    for k in range(1, L.shape[0]):
        L[k, :k + 1] = update_chol_row(L[k, :k + 1], dL[k, :k + 1], gamma)
    return L


def update_gapm(params: GapmParams, grad, t: int, schedule: StepSchedule, q: QMatrix) -> GapmParams:
    alpha = exponentiated_gradient(params.alpha, grad.d_alpha, schedule.gamma(t, "alpha"), q.mask, STEP_CAP)
    theta = exponentiated_gradient(params.theta, grad.d_theta, schedule.gamma(t, "theta"), max_step=STEP_CAP)
    # sieves of inactive pairs are never evaluated; keep them fixed
    theta = np.where(q.mask[..., None], theta, params.theta)
    chol = update_chol(params.chol, grad.d_chol, schedule.gamma(t, "l"))
    return params.replace(alpha=alpha, theta=theta, chol=chol)


def augmented_delta(delta, q: QMatrix):
    """(intercept, masked slopes, slack) rows; each lies on the simplex."""
    d = np.asarray(delta, dtype=float)
    slopes = d[:, 1:] * q.entries
    slack = 1.0 - d[:, 0] - slopes.sum(axis=1)
    return np.column_stack([d[:, 0], slopes, np.clip(slack, 0.0, None)])


def update_apm(params: ApmParams, grads, gamma_delta: float, gamma_musig: float, q: QMatrix) -> ApmParams:
    J, K = q.entries.shape
    aug = augmented_delta(params.delta, q)
    g_aug = np.column_stack([grads.d_delta, np.zeros(J)])
    mask = np.column_stack([np.ones(J, bool), q.mask, np.ones(J, bool)])
    aug = exponentiated_gradient(aug, g_aug, gamma_delta, mask, STEP_CAP)
    mean = params.mean + gamma_musig * grads.d_mean
    C = params.cov_chol + gamma_musig * np.tril(grads.d_cov_chol)
    idx = np.arange(K)
    C[idx, idx] = np.maximum(C[idx, idx], DIAG_FLOOR)
    return params.replace(delta=aug[:, :-1], mean=mean, cov_chol=C)
