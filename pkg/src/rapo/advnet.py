"""Amortised dual temperature: a small network predicting eta(s, a).

The network is d -> 32 -> 32 -> 1 with tanh hidden units and a softplus
output clamped to [1e-6, 1e3]. Gradients are accumulated by hand. Its
prediction warm-starts the per-row budget projection; the projected
temperature enters the robust target through a straight-through estimator.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import DomainError
from .kl_dual import DEGENERATE, DualConfig, _tilt_stats, solve_eta_batch

ETA_LO = 1e-6
ETA_HI = 1e3
HIDDEN = 32
PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")

ADAM_B1 = 0.9
ADAM_B2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class AdvNetParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray

    @classmethod
    def init(cls, d: int, rng, hidden: int = HIDDEN, out_bias: float = 0.0) -> AdvNetParams:
        def glorot(n_in, n_out):
            lim = np.sqrt(6.0 / (n_in + n_out))
            return rng.uniform(-lim, lim, (n_in, n_out))

        return cls(glorot(d, hidden), np.zeros(hidden), glorot(hidden, hidden),
                   np.zeros(hidden), glorot(hidden, 1), np.full(1, out_bias))

    @classmethod
    def zeros(cls, d: int, hidden: int = HIDDEN) -> AdvNetParams:
        return cls(np.zeros((d, hidden)), np.zeros(hidden), np.zeros((hidden, hidden)),
                   np.zeros(hidden), np.zeros((hidden, 1)), np.zeros(1))

    def arrays(self) -> dict:
        return {k: getattr(self, k) for k in PARAM_NAMES}

    def copy(self) -> AdvNetParams:
        return AdvNetParams(**{k: v.copy() for k, v in self.arrays().items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.arrays().values()])

    def with_flat(self, x) -> AdvNetParams:
        out, i = {}, 0
        for k, v in self.arrays().items():
            out[k] = np.asarray(x[i:i + v.size], float).reshape(v.shape)
            i += v.size
        return AdvNetParams(**out)

    def to_dict(self) -> dict:
        return {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                for k, v in self.arrays().items()}

    @classmethod
    def from_dict(cls, d: dict) -> AdvNetParams:
        missing = [k for k in PARAM_NAMES if k not in d]
        if missing:
            raise DomainError(f"checkpoint is missing {missing}")
        return cls(**{k: np.asarray(d[k]["data"], float).reshape(d[k]["shape"])
                      for k in PARAM_NAMES})

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> AdvNetParams:
        return cls.from_dict(json.loads(Path(path).read_text()))


def encode_features(states, actions, n_states: int, n_actions: int,
                    state_only: bool = False) -> np.ndarray:
    """One-hot state, optionally concatenated with one-hot action."""
    x = np.eye(n_states)[np.asarray(states, dtype=int)]
    if state_only:
        return x
    return np.hstack([x, np.eye(n_actions)[np.asarray(actions, dtype=int)]])


def _softplus(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _forward_cache(params: AdvNetParams, x):
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != params.w1.shape[0]:
        raise DomainError(f"features must be (B, {params.w1.shape[0]}), got {x.shape}")
    h1 = np.tanh(x @ params.w1 + params.b1)
    h2 = np.tanh(h1 @ params.w2 + params.b2)
    z = (h2 @ params.w3 + params.b3)[:, 0]
    sp = _softplus(z)
    eta = np.clip(sp, ETA_LO, ETA_HI)
    return eta, (x, h1, h2, z, sp)


def advnet_forward(params: AdvNetParams, features) -> np.ndarray:
    return _forward_cache(params, features)[0]


def advnet_backward(params: AdvNetParams, cache, grad_eta) -> AdvNetParams:
    """Vector-Jacobian product of the forward map with ``grad_eta`` (length B)."""
    x, h1, h2, z, sp = cache
    inside = (sp >= ETA_LO) & (sp <= ETA_HI)
    gz = np.where(inside, grad_eta * _sigmoid(z), 0.0)[:, None]
    gw3 = h2.T @ gz
    gb3 = gz.sum(axis=0)
    gh2 = (gz @ params.w3.T) * (1.0 - h2 ** 2)
    gw2 = h1.T @ gh2
    gb2 = gh2.sum(axis=0)
    gh1 = (gh2 @ params.w2.T) * (1.0 - h1 ** 2)
    gw1 = x.T @ gh1
    gb1 = gh1.sum(axis=0)
    return AdvNetParams(gw1, gb1, gw2, gb2, gw3, gb3)


# --------------------------------------------------------------------------
# projection and targets


@dataclass
class Projection:
    eta: np.ndarray
    status: np.ndarray
    kl: np.ndarray
    iterations: np.ndarray


def project_eta_to_budget(next_values, eta_init, epsilon: float, tol: float = 1e-8,
                          max_iter: int = 200, newton: bool = True) -> Projection:
    """Per-row temperature with empirical KL at the budget, warm-started at eta_init."""
    v = np.atleast_2d(np.asarray(next_values, dtype=float))
    base = np.full(v.shape, 1.0 / v.shape[1])
    cfg = DualConfig(epsilon=epsilon, eta_min=ETA_LO, eta_max=ETA_HI, tol_kl=tol,
                     max_iter=max_iter, newton=newton)
    init = None if eta_init is None else np.broadcast_to(
        np.asarray(eta_init, float), (v.shape[0],))
    sol = solve_eta_batch(v, base, cfg, eta_init=init)
    return Projection(sol.eta, sol.status, sol.kl, sol.iterations)


def straight_through(eta_pred, eta_star):
    """Forward value is ``eta_star``; the backward map to ``eta_pred`` is identity.

    Returns ``(eta_tilde, vjp)``.
    """
    eta_star = np.asarray(eta_star, dtype=float)
    if np.shape(eta_pred) != eta_star.shape:
        raise DomainError("eta_pred and eta_star differ in shape")
    return eta_star.copy(), lambda g: np.asarray(g, dtype=float)


def _dual_stats(next_values, eta):
    v = np.atleast_2d(np.asarray(next_values, dtype=float))
    base = np.full(v.shape, 1.0 / v.shape[1])
    mu, logz, q, kl, _ = _tilt_stats(v, base, np.asarray(eta, float))
    psi = mu - logz / eta
    eq = np.sum(q * v, axis=1)
    return psi, kl, eq


def robust_dual_value(next_values, eta_tilde, epsilon: float, offset: bool = True):
    """``-(1/eta) log mean exp(-eta V) - eps/eta`` row-wise."""
    eta = np.atleast_1d(np.asarray(eta_tilde, dtype=float))
    if np.any(eta <= 0):
        raise DomainError("eta must be positive")
    psi, _, _ = _dual_stats(next_values, eta)
    return psi - epsilon / eta if offset else psi


def robust_targets(rewards, done_flags, gamma: float, v_rob) -> np.ndarray:
    r = np.asarray(rewards, dtype=float)
    d = np.asarray(done_flags, dtype=float)
    return r + gamma * (1.0 - d) * np.asarray(v_rob, dtype=float)


# --------------------------------------------------------------------------
# loss


@dataclass
class TargetBatch:
    rewards: np.ndarray
    done_flags: np.ndarray
    next_values: np.ndarray  # (B, m)
    features: np.ndarray  # (B, d)

    def __post_init__(self):
        self.rewards = np.asarray(self.rewards, float)
        self.done_flags = np.asarray(self.done_flags, float)
        self.next_values = np.atleast_2d(np.asarray(self.next_values, float))
        self.features = np.atleast_2d(np.asarray(self.features, float))
        b = self.rewards.shape[0]
        if (self.done_flags.shape != (b,) or self.next_values.shape[0] != b
                or self.features.shape[0] != b):
            raise DomainError("TargetBatch fields disagree on the batch size")
        if not np.all((self.done_flags == 0) | (self.done_flags == 1)):
            raise DomainError("done flags must be 0 or 1")


@dataclass(frozen=True)
class AdvNetConfig:
    epsilon: float = 0.1
    gamma: float = 0.95
    lambda_kl: float = 1.0
    # weight of the log-space regression of eta_pred onto the projected eta*
    sup_weight: float = 1.0
    offset: bool = True
    tol: float = 1e-8
    max_iter: int = 200


@dataclass
class LossResult:
    loss: float
    grads: AdvNetParams
    targets: np.ndarray
    eta_pred: np.ndarray
    eta_star: np.ndarray
    diagnostics: dict = field(default_factory=dict)


def advnet_loss_and_grads(params: AdvNetParams, batch: TargetBatch, cfg: AdvNetConfig,
                          eta_star=None, eta_pred_detached=None,
                          degenerate=None) -> LossResult:
    """Loss ``E[y] + lambda E[(KL(eta~) - eps)_+^2] + sup E[(log eta_pred - log eta*)^2]``.

    ``eta~ = eta* - stopgrad(eta_pred) + eta_pred``. When ``eta_star`` is not
    given the projection is run, warm-started at the prediction; passing it
    (with the detached prediction) freezes the stop-gradient branch, which is
    what a finite-difference check needs. Constant rows are detached: their
    eta~ is held at the cap and they carry no penalty.
    """
    eta_pred, cache = _forward_cache(params, batch.features)
    if eta_star is None:
        proj = project_eta_to_budget(batch.next_values, eta_pred, cfg.epsilon, cfg.tol,
                                     cfg.max_iter)
        eta_star = proj.eta
        degenerate = proj.status == DEGENERATE
    eta_star = np.asarray(eta_star, float)
    if degenerate is None:
        degenerate = np.zeros(eta_star.shape, bool)
    detached = eta_pred.copy() if eta_pred_detached is None else np.asarray(eta_pred_detached)

    live = ~degenerate
    eta_t = np.where(live, eta_star - detached + eta_pred, eta_star)
    psi, kl, _ = _dual_stats(batch.next_values, eta_t)
    eps = cfg.epsilon
    v_rob = psi - eps / eta_t if cfg.offset else psi
    y = robust_targets(batch.rewards, batch.done_flags, cfg.gamma, v_rob)
    b = y.size
    hinge = np.where(live, np.maximum(kl - eps, 0.0), 0.0)
    n_live = max(int(live.sum()), 1)
    log_err = np.where(live, np.log(eta_pred) - np.log(eta_star), 0.0)
    loss = (y.mean() + cfg.lambda_kl * np.sum(hinge ** 2) / b
            + cfg.sup_weight * np.sum(log_err ** 2) / n_live)

    # d v_rob / d eta = (eps - KL) / eta^2 with the offset, -KL / eta^2 without
    dv = ((eps if cfg.offset else 0.0) - kl) / eta_t ** 2
    dy = cfg.gamma * (1.0 - batch.done_flags) * dv / b
    # d KL / d eta = eta Var_q(V)
    var = _tilt_var(batch.next_values, eta_t)
    dpen = cfg.lambda_kl * 2.0 * hinge * eta_t * var / b
    g_tilde = np.where(live, dy + dpen, 0.0)
    _, vjp = straight_through(eta_pred, eta_star)
    g_pred = vjp(g_tilde) + cfg.sup_weight * 2.0 * log_err / eta_pred / n_live
    grads = advnet_backward(params, cache, g_pred)

    diag = {
        "eta_mean": float(eta_t.mean()),
        "kl_mean": float(kl[live].mean()) if live.any() else 0.0,
        "v_rob_mean": float(v_rob.mean()),
        "eta_abs_err": float(np.abs(eta_pred - eta_star)[live].mean()) if live.any() else 0.0,
    }
    return LossResult(float(loss), grads, y, eta_pred, eta_star, diag)


def _tilt_var(next_values, eta):
    v = np.atleast_2d(np.asarray(next_values, dtype=float))
    base = np.full(v.shape, 1.0 / v.shape[1])
    return _tilt_stats(v, base, np.asarray(eta, float))[4]


# --------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def like(cls, params: AdvNetParams) -> AdamState:
        n = params.flat().size
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(params: AdvNetParams, grads: AdvNetParams, state: AdamState,
              step_size: float) -> AdvNetParams:
    g = grads.flat()
    state.t += 1
    state.m = ADAM_B1 * state.m + (1 - ADAM_B1) * g
    state.v = ADAM_B2 * state.v + (1 - ADAM_B2) * g * g
    m_hat = state.m / (1 - ADAM_B1 ** state.t)
    v_hat = state.v / (1 - ADAM_B2 ** state.t)
    return params.with_flat(params.flat() - step_size * m_hat / (np.sqrt(v_hat) + ADAM_EPS))


def advnet_update(params: AdvNetParams, batch: TargetBatch, cfg: AdvNetConfig, steps: int,
                  step_size: float = 1e-3, state: AdamState | None = None):
    """``steps`` Adam iterations on one batch; returns (params, state, last result)."""
    state = AdamState.like(params) if state is None else state
    result = None
    for _ in range(steps):
        result = advnet_loss_and_grads(params, batch, cfg)
        params = adam_step(params, result.grads, state, step_size)
    return params, state, result


def quadratic_error_probe(samples, epsilon: float, delta_grid, tol: float = 1e-13):
    """``phi(eta*) - phi(eta* + delta)`` over ``delta_grid`` plus the log-log slope.

    ``samples`` is a ValueSamples. Returns ``(eta_star, gaps, slope)``; the
    slope is fitted on the nonzero deltas.
    """
    values = samples.values[None, :]
    base = samples.base_probs[None, :]
    sol = solve_eta_batch(values, base, DualConfig(epsilon=epsilon, tol_kl=tol, newton=True,
                                                   max_iter=500))
    eta_star = float(sol.eta[0])
    deltas = np.asarray(delta_grid, dtype=float)

    def phi(eta):
        mu, logz, _, _, _ = _tilt_stats(values, base, np.array([eta]))
        return float(mu[0] - logz[0] / eta - epsilon / eta)

    top = phi(eta_star)
    gaps = np.array([top - phi(eta_star + d) if d != 0 else 0.0 for d in deltas])
    nz = (deltas != 0) & (gaps > 0)
    slope = (float(np.polyfit(np.log(np.abs(deltas[nz])), np.log(gaps[nz]), 1)[0])
             if np.unique(np.abs(deltas[nz])).size >= 2 else float("nan"))
    return eta_star, gaps, slope
