"""Model-level adversary: KL-constrained Boltzmann reweighting of an ensemble.

Weights over K models follow ``w_k ∝ rho_k exp(-beta h_k)`` where ``h_k`` is
a vulnerability score (low = adverse). ``beta`` is chosen so that
``KL(w || rho) = kappa``; the map beta -> KL is nondecreasing with slope
``beta Var_w(h)``, so bisection is enough.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigError, DomainError
from .kl_dual import (
    CLAMPED,
    DEGENERATE,
    EXCEEDS,
    DualConfig,
    _constant_rows,
    kl_to_base,
    solve_eta_batch,
)

STATUS_PRIOR = "Prior"
STATUS_TIGHT = "Tight"
STATUS_CONSTANT = "DegenerateConstant"
STATUS_EXCEEDS = "BudgetExceedsMax"
STATUS_CLAMPED = "ClampedMax"


@dataclass(frozen=True)
class MixtureWeights:
    weights: np.ndarray
    kl_to_prior: float
    beta: float = 0.0
    status: str = STATUS_PRIOR

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or w.size == 0:
            raise DomainError("weights must be a non-empty vector")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise DomainError("weights must lie on the simplex")
        object.__setattr__(self, "weights", w)

    @property
    def entropy(self) -> float:
        w = self.weights[self.weights > 0]
        return float(-np.sum(w * np.log(w)))

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "kl_to_prior": self.kl_to_prior,
            "beta": self.beta,
            "status": self.status,
        }


@dataclass(frozen=True)
class VulnerabilityScores:
    scores: np.ndarray
    ema_decay: float = 0.0
    raw_history_len: int = 1

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=float)
        if not np.all(np.isfinite(s)):
            raise DomainError("scores must be finite")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError("ema_decay must lie in [0, 1)")
        object.__setattr__(self, "scores", s)


def _check_prior(prior, scores=None):
    prior = np.asarray(prior, dtype=float)
    if prior.ndim != 1 or prior.size == 0:
        raise DomainError("need at least one model (K >= 1)")
    if np.any(prior < 0) or abs(prior.sum() - 1.0) > 1e-12:
        raise DomainError("prior must lie on the simplex")
    if scores is None:
        return prior, None
    scores = np.asarray(scores, dtype=float)
    if scores.shape != prior.shape:
        raise DomainError(f"prior has {prior.size} entries but scores {scores.size}")
    if not np.all(np.isfinite(scores)):
        raise DomainError("scores must be finite")
    return prior, scores


def boltzmann_weights(prior, scores, beta: float) -> np.ndarray:
    """``w_k ∝ prior_k exp(-beta scores_k)``; exactly ``prior`` at beta = 0."""
    prior, scores = _check_prior(prior, scores)
    if not (beta >= 0 and math.isfinite(beta)):
        raise DomainError("beta must be finite and >= 0")
    if beta == 0:
        return prior.copy()
    support = prior > 0
    x = np.where(support, -beta * scores, -np.inf)
    x = x - x[support].max()
    w = prior * np.exp(x)
    return w / w.sum()


def solve_beta(prior, scores, kappa: float, tol: float = 1e-8,
               beta_max: float = 1e3, max_iter: int = 200) -> MixtureWeights:
    """Inverse temperature with ``KL(w_beta || prior) = kappa`` by bisection.

    Budgets beyond the reach of ``beta_max`` return the ``beta_max`` weights
    flagged ``BudgetExceedsMax``; constant scores return the prior (beta 0).
    """
    if not (kappa >= 0 and math.isfinite(kappa)):
        raise ConfigError(f"kappa must be finite and >= 0, got {kappa}")
    if not (tol > 0 and beta_max > 0):
        raise ConfigError("tol and beta_max must be positive")
    prior, scores = _check_prior(prior, scores)
    if kappa == 0:
        return MixtureWeights(prior.copy(), 0.0, 0.0, STATUS_PRIOR)
    if _constant_rows(scores[None, :], prior[None, :])[0]:
        return MixtureWeights(prior.copy(), 0.0, 0.0, STATUS_CONSTANT)

    cfg = DualConfig(epsilon=kappa, eta_min=min(1e-8, beta_max / 2), eta_max=beta_max,
                     tol_kl=tol, max_iter=max_iter)
    sol = solve_eta_batch(scores[None, :], prior[None, :], cfg)
    beta = float(sol.eta[0])
    code = int(sol.status[0])
    status = {EXCEEDS: STATUS_EXCEEDS, CLAMPED: STATUS_CLAMPED,
              DEGENERATE: STATUS_CONSTANT}.get(code, STATUS_TIGHT)
    w = boltzmann_weights(prior, scores, beta)
    return MixtureWeights(w, kl_to_base(w, prior), beta, status)


def simplex_project(w) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort and threshold)."""
    y = np.asarray(w, dtype=float)
    if y.ndim != 1 or y.size == 0 or not np.all(np.isfinite(y)):
        raise DomainError("simplex_project needs a finite non-empty vector")
    u = np.sort(y)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, y.size + 1)
    r = np.flatnonzero(u - css / k > 0)[-1]
    tau = css[r] / (r + 1)
    return np.maximum(y - tau, 0.0)


def score_models(critic, ensemble, states, actions, scorer_samples: int = 0,
                 rng=None, previous: VulnerabilityScores | None = None,
                 ema_decay: float = 0.0) -> VulnerabilityScores:
    """Vulnerability ``h_k``: mean critic value of next states under model k.

    With ``scorer_samples == 0`` the tabular expectation over s' is exact;
    otherwise each pair draws that many successors per model. When
    ``previous`` is given and ``ema_decay > 0`` the scores are smoothed.
    """
    v = np.asarray(critic, dtype=float)
    states = np.asarray(states, dtype=int).ravel()
    actions = np.asarray(actions, dtype=int).ravel()
    if states.size == 0 or states.shape != actions.shape:
        raise DomainError("score_models needs a non-empty batch of (s, a) pairs")
    h = np.empty(len(ensemble.models))
    for k, kernel in enumerate(ensemble.models):
        rows = kernel[states, actions]
        if scorer_samples <= 0:
            h[k] = float(np.mean(rows @ v))
        else:
            if rng is None:
                raise DomainError("sampled scoring needs an rng")
            cdf = np.cumsum(rows, axis=1)
            u = rng.random((rows.shape[0], scorer_samples))
            idx = np.minimum((u[:, :, None] > cdf[:, None, :]).sum(axis=2), v.size - 1)
            h[k] = float(np.mean(v[idx]))
    if previous is not None and ema_decay > 0:
        h = ema_decay * previous.scores + (1.0 - ema_decay) * h
        return VulnerabilityScores(h, ema_decay, previous.raw_history_len + 1)
    return VulnerabilityScores(h, ema_decay, 1)


def joint_kl_decomposition(w, prior, per_model_traj_kls):
    """Chain rule: ``KL(joint) = KL(w || rho) + sum_k w_k KL_k``."""
    w = np.asarray(w, dtype=float)
    prior = np.asarray(prior, dtype=float)
    traj = np.asarray(per_model_traj_kls, dtype=float)
    if not (w.shape == prior.shape == traj.shape):
        raise DomainError("w, prior and per-model KLs must have equal length")
    model_term = kl_to_base(w, prior)
    traj_term = float(np.sum(w * traj))
    return model_term + traj_term, model_term, traj_term


def per_step_to_trajectory_budget(step_budget: float, gamma: float) -> float:
    """Discounted trajectory budget implied by a per-step KL budget."""
    if not 0 < gamma < 1:
        raise DomainError("gamma must lie in (0, 1)")
    if step_budget < 0:
        raise DomainError("step budget must be >= 0")
    return step_budget / (1.0 - gamma)
