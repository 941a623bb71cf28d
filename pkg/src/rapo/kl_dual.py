"""KL-ball robust expectations through the one-dimensional dual.

For a finite support with base law ``p`` and values ``V`` the robust
expectation over ``{q : KL(q || p) <= eps}`` equals

    sup_{eta >= 0}  -(1/eta) log E_p[exp(-eta V)] - eps/eta,

and the optimal ``q`` is the exponential tilt ``q ∝ p exp(-eta* V)`` with
``KL(q || p) = eps``. Everything here works on the last axis so the same
code serves a single sample vector and a (rows, m) batch of transition rows.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError, DomainError

# below this temperature the entropic risk is replaced by its eta -> 0 limit
ETA_ZERO = 1e-9
# relative oscillation under which a value vector counts as constant
CONST_RTOL = 1e-12
# log1p/expm1 branch for mild tilts (|eta (V - mean)| below this everywhere)
_SMALL_TILT = 0.5
# Newton refinement is skipped when the tilted variance is below this floor
NEWTON_VAR_FLOOR = 1e-10


class DualStatus(str, enum.Enum):
    TIGHT = "Tight"
    DEGENERATE_CONSTANT = "DegenerateConstant"
    BUDGET_EXCEEDS_MAX = "BudgetExceedsMax"
    # max_iter reached before |KL - eps| <= tol; eta is the feasible bracket end
    CLAMPED_MAX = "ClampedMax"


_STATUS_BY_CODE = (
    DualStatus.TIGHT,
    DualStatus.DEGENERATE_CONSTANT,
    DualStatus.BUDGET_EXCEEDS_MAX,
    DualStatus.CLAMPED_MAX,
)
TIGHT, DEGENERATE, EXCEEDS, CLAMPED = range(4)


@dataclass(frozen=True)
class ValueSamples:
    """Values ``V(s'_i)`` on a finite support with base probabilities."""

    values: np.ndarray
    base_probs: np.ndarray = None

    def __post_init__(self):
        values = np.atleast_1d(np.asarray(self.values, dtype=float))
        if values.ndim != 1 or values.size == 0:
            raise DomainError("values must be a non-empty vector")
        if not np.all(np.isfinite(values)):
            raise DomainError("values must be finite")
        if self.base_probs is None:
            base = np.full(values.size, 1.0 / values.size)
        else:
            base = np.atleast_1d(np.asarray(self.base_probs, dtype=float))
            if base.shape != values.shape:
                raise DomainError("base_probs and values differ in length")
            if np.any(base < 0) or abs(base.sum() - 1.0) > 1e-12:
                raise DomainError("base_probs must lie on the simplex")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "base_probs", base)

    @property
    def m(self) -> int:
        return self.values.size

    @property
    def mean(self) -> float:
        return float(self.base_probs @ self.values)

    def is_uniform(self) -> bool:
        return bool(np.allclose(self.base_probs, 1.0 / self.m, rtol=0, atol=1e-12))


@dataclass(frozen=True)
class DualConfig:
    epsilon: float = 0.0
    eta_min: float = 1e-8
    eta_max: float = 1e3
    tol_kl: float = 1e-8
    max_iter: int = 200
    newton: bool = False
    bias_correction: bool = False
    # failure probability xi in c_m = sqrt(log(1/xi) / m)
    confidence: float = 0.05

    def __post_init__(self):
        if not (self.epsilon >= 0 and math.isfinite(self.epsilon)):
            raise ConfigError(f"epsilon must be finite and >= 0, got {self.epsilon}")
        if not (0 < self.eta_min < self.eta_max < math.inf):
            raise ConfigError(
                f"need 0 < eta_min < eta_max, got [{self.eta_min}, {self.eta_max}]"
            )
        if not self.tol_kl > 0:
            raise ConfigError("tol_kl must be positive")
        if self.max_iter < 1:
            raise ConfigError("max_iter must be a positive integer")
        if not 0 < self.confidence < 1:
            raise ConfigError("confidence must lie in (0, 1)")


@dataclass(frozen=True)
class DualSolution:
    eta_star: float
    tilted: np.ndarray
    kl_achieved: float
    dual_value: float
    status: DualStatus
    iterations: int = 0

    def to_dict(self) -> dict:
        return {
            "eta_star": self.eta_star,
            "tilted": self.tilted.tolist(),
            "kl_achieved": self.kl_achieved,
            "dual_value": self.dual_value,
            "status": self.status.value,
            "iterations": self.iterations,
        }


@dataclass
class DualBatch:
    """Row-wise solution of many duals at once (arrays over rows)."""

    eta: np.ndarray
    tilted: np.ndarray
    kl: np.ndarray
    dual_value: np.ndarray
    status: np.ndarray
    iterations: np.ndarray = field(default=None)

    def status_of(self, i: int) -> DualStatus:
        return _STATUS_BY_CODE[int(self.status[i])]


# --------------------------------------------------------------------------
# row-wise kernels


def _as_rows(values, base):
    values = np.asarray(values, dtype=float)
    base = np.asarray(base, dtype=float)
    squeeze = values.ndim == 1
    values = np.atleast_2d(values)
    base = np.broadcast_to(np.atleast_2d(base), values.shape)
    return values, base, squeeze


def _tilt_stats(values, base, eta):
    """Log-partition, tilted law, KL and variance for each row.

    ``values``/``base`` are (R, m) and ``eta`` is (R,). The partition is taken
    relative to the base mean ``mu`` so that ``Psi = mu - log Z_mu / eta``
    stays accurate as eta -> 0.
    """
    support = base > 0
    mu = np.sum(base * values, axis=1)
    x = -eta[:, None] * (values - mu[:, None])
    x = np.where(support, x, -np.inf)
    xmax = np.max(x, axis=1)
    xmin = np.min(np.where(support, x, np.inf), axis=1)
    mild = (xmax < _SMALL_TILT) & (xmin > -_SMALL_TILT)

    with np.errstate(over="ignore", invalid="ignore"):
        shifted = np.exp(x - xmax[:, None])
        logz_big = np.log(np.sum(base * shifted, axis=1)) + xmax
        xm = np.where(support & mild[:, None], x, 0.0)
        logz_small = np.log1p(np.sum(base * np.expm1(xm), axis=1))
    logz = np.where(mild, logz_small, logz_big)

    logratio = np.where(support, x - logz[:, None], 0.0)  # log(q / base)
    q = np.where(support, base * np.exp(logratio), 0.0)
    q /= q.sum(axis=1, keepdims=True)
    kl = np.sum(np.where(q > 0, q * logratio, 0.0), axis=1)
    kl = np.maximum(kl, 0.0)
    eq = np.sum(q * values, axis=1)
    var = np.sum(q * (values - eq[:, None]) ** 2, axis=1)
    return mu, logz, q, kl, var


def _entropic_rows(values, base, eta):
    mu, logz, _, _, _ = _tilt_stats(values, base, np.maximum(eta, ETA_ZERO))
    return np.where(eta < ETA_ZERO, mu, mu - logz / np.maximum(eta, ETA_ZERO))


def _constant_rows(values, base):
    support = base > 0
    vmax = np.max(np.where(support, values, -np.inf), axis=1)
    vmin = np.min(np.where(support, values, np.inf), axis=1)
    mu = np.sum(base * values, axis=1)
    return (vmax - vmin) < CONST_RTOL * (1.0 + np.abs(mu))


def solve_eta_batch(values, base, cfg: DualConfig, eta_init=None) -> DualBatch:
    """Solve ``KL(q_eta || base) = eps`` independently for every row.

    Bisection runs on log(eta) inside [eta_min, eta_max]; with ``cfg.newton``
    a safeguarded Newton step on log(eta) replaces the midpoint whenever it
    stays inside the bracket. ``eta_init`` (per row) seeds the bracket.
    """
    values, base, _ = _as_rows(values, base)
    n_rows = values.shape[0]
    eps = cfg.epsilon
    eta = np.full(n_rows, cfg.eta_max)
    status = np.full(n_rows, TIGHT)
    iters = np.zeros(n_rows, dtype=int)

    const = _constant_rows(values, base)
    status[const] = DEGENERATE
    active = ~const

    if eps == 0.0:
        # the ball is the base law itself; report the eta -> 0 end
        eta[active] = cfg.eta_min
        active[:] = False

    lo = np.full(n_rows, math.log(cfg.eta_min))
    hi = np.full(n_rows, math.log(cfg.eta_max))
    done = ~active

    if active.any():
        idx = np.flatnonzero(active)
        _, _, _, kl_hi, _ = _tilt_stats(values[idx], base[idx], eta[idx])
        short = kl_hi < eps - cfg.tol_kl
        status[idx[short]] = EXCEEDS
        at_max = np.abs(kl_hi - eps) <= cfg.tol_kl
        done[idx[short | at_max]] = True

    u = 0.5 * (lo + hi)
    if eta_init is not None:
        init = np.clip(np.broadcast_to(np.asarray(eta_init, float), (n_rows,)),
                       cfg.eta_min, cfg.eta_max)
        u = np.log(init)

    for _ in range(cfg.max_iter):
        idx = np.flatnonzero(~done)
        if idx.size == 0:
            break
        ui = u[idx]
        e = np.exp(ui)
        _, _, _, kl_u, var_u = _tilt_stats(values[idx], base[idx], e)
        iters[idx] += 1
        hit = np.abs(kl_u - eps) <= cfg.tol_kl
        eta[idx[hit]] = e[hit]
        done[idx[hit]] = True
        below = ~hit & (kl_u < eps)
        lo[idx[below]] = ui[below]
        above = ~hit & ~below
        hi[idx[above]] = ui[above]
        # bracket collapsed to rounding level: no representable eta is closer
        flat = ~hit & (hi[idx] - lo[idx] <= 4e-16 * np.maximum(1.0, np.abs(hi[idx])))
        eta[idx[flat]] = np.exp(lo[idx[flat]])
        status[idx[flat]] = CLAMPED
        done[idx[flat]] = True

        nxt = 0.5 * (lo[idx] + hi[idx])
        if cfg.newton:
            # Newton on log eta: d KL / d log eta = eta^2 Var_q(V)
            slope = e * e * var_u
            ok = var_u > NEWTON_VAR_FLOOR
            step = ui - (kl_u - eps) / np.where(ok, slope, 1.0)
            inside = ok & (step > lo[idx]) & (step < hi[idx])
            nxt = np.where(inside, step, nxt)
        u[idx] = nxt

    left = ~done
    eta[left] = np.exp(lo[left])
    status[left] = CLAMPED

    _, _, q, kl, _ = _tilt_stats(values, base, eta)
    mu = np.sum(base * values, axis=1)
    q = np.where(const[:, None] | (eps == 0.0), base, q)
    kl = np.where(const | (eps == 0.0), 0.0, kl)
    dual = _entropic_rows(values, base, eta) - eps / eta
    dual = np.where(eps == 0.0, mu, dual)
    if cfg.bias_correction:
        m = np.count_nonzero(base > 0, axis=1)
        c_m = np.sqrt(math.log(1.0 / cfg.confidence) / m)
        dual = dual - c_m / eta
    return DualBatch(eta=eta, tilted=q, kl=kl, dual_value=dual, status=status,
                     iterations=iters)


# --------------------------------------------------------------------------
# public scalar API


def _check_eta(eta):
    if not (eta >= 0 and math.isfinite(eta)):
        raise DomainError(f"eta must be finite and >= 0, got {eta}")


def entropic_risk(samples: ValueSamples, eta: float) -> float:
    """``-(1/eta) log E_p[exp(-eta V)]``; the weighted mean for eta < 1e-9."""
    _check_eta(eta)
    v, b, _ = _as_rows(samples.values, samples.base_probs)
    return float(_entropic_rows(v, b, np.array([float(eta)]))[0])


def soft_penalty_risk(samples: ValueSamples, eta: float) -> float:
    """``inf_q E_q[V] + KL(q || p) / eta``, which is the entropic risk."""
    if not eta > 0:
        raise DomainError("soft penalty needs eta > 0")
    return entropic_risk(samples, eta)


def dual_objective(samples: ValueSamples, eta: float, epsilon: float) -> float:
    """Hard-constraint dual ``phi(eta) = Psi_eta(V) - eps / eta``."""
    _check_eta(eta)
    if epsilon < 0:
        raise DomainError("epsilon must be >= 0")
    if eta == 0:
        if epsilon > 0:
            raise DomainError("dual objective is -inf at eta = 0 when epsilon > 0")
        return samples.mean
    return entropic_risk(samples, eta) - epsilon / eta


def tilted_weights(samples: ValueSamples, eta: float) -> np.ndarray:
    """Exponential tilt ``q_i ∝ p_i exp(-eta V_i)``."""
    _check_eta(eta)
    if eta == 0:
        return samples.base_probs.copy()
    v, b, _ = _as_rows(samples.values, samples.base_probs)
    if _constant_rows(v, b)[0]:
        return samples.base_probs.copy()
    _, _, q, _, _ = _tilt_stats(v, b, np.array([float(eta)]))
    return q[0]


def kl_to_base(tilted, base) -> float:
    """``sum q log(q / p)`` with ``0 log 0 = 0``; ``inf`` if q leaves p's support."""
    q = np.asarray(tilted, dtype=float)
    p = np.asarray(base, dtype=float)
    if q.shape != p.shape:
        raise DomainError("tilted and base differ in shape")
    pos = q > 0
    if np.any(pos & (p <= 0)):
        return math.inf
    return float(max(np.sum(q[pos] * np.log(q[pos] / p[pos])), 0.0))


def empirical_kl(samples: ValueSamples, eta: float) -> float:
    """``sum_i q_i log(m q_i)`` for the tilt of a uniform empirical law."""
    if not samples.is_uniform():
        raise DomainError("empirical_kl needs a uniform base; use kl_to_base")
    _check_eta(eta)
    if eta == 0:
        return 0.0
    v, b, _ = _as_rows(samples.values, samples.base_probs)
    if _constant_rows(v, b)[0]:
        return 0.0
    return float(_tilt_stats(v, b, np.array([float(eta)]))[3][0])


def kl_derivative(samples: ValueSamples, eta: float) -> float:
    """``d/d eta KL(q_eta || p) = eta Var_{q_eta}(V)``."""
    _check_eta(eta)
    if eta == 0:
        return 0.0
    v, b, _ = _as_rows(samples.values, samples.base_probs)
    _, _, _, _, var = _tilt_stats(v, b, np.array([float(eta)]))
    return float(eta * var[0])


def solve_eta(samples: ValueSamples, cfg: DualConfig, eta_init=None) -> DualSolution:
    """Optimal dual temperature for one sample vector."""
    init = None if eta_init is None else np.array([float(eta_init)])
    out = solve_eta_batch(samples.values, samples.base_probs, cfg, eta_init=init)
    return DualSolution(
        eta_star=float(out.eta[0]),
        tilted=out.tilted[0],
        kl_achieved=float(out.kl[0]),
        dual_value=float(out.dual_value[0]),
        status=out.status_of(0),
        iterations=int(out.iterations[0]),
    )


def robust_expectation(samples: ValueSamples, cfg: DualConfig) -> float:
    """``inf {E_q[V] : KL(q || p) <= eps}`` through the dual."""
    return solve_eta(samples, cfg).dual_value
