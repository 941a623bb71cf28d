"""Robust dynamic programming over (s, a)-rectangular KL balls.

Each transition row ``p(.|s,a)`` is replaced by the worst law within KL
radius ``eps``. The inner infimum is evaluated through the scalar dual of
:mod:`rapo.kl_dual`, batched over all rows at once.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import ConvergenceError, DomainError
from .kl_dual import (
    DEGENERATE,
    EXCEEDS,
    DualConfig,
    _tilt_stats,
    solve_eta_batch,
)
from .mdp import TabularMdp, check_policy

# tighter than the kl_dual default: the tilted kernel must reproduce the dual
# value to ~1e-9 for the worst-case consistency checks
DEFAULT_DUAL = DualConfig(tol_kl=1e-12, newton=True)
STATUS_ROW_MIN = 4  # budget beyond reach: inner inf is the support minimum
# bracket for rows whose root lies above the configured temperature cap
WIDE_ETA_MAX = 1e16


@dataclass(frozen=True)
class WorstCaseKernel:
    kernel: np.ndarray
    eta_map: np.ndarray
    kl_map: np.ndarray
    status: np.ndarray


@dataclass
class RowSolution:
    value: np.ndarray  # (S, A) inner infimum
    tilted: np.ndarray  # (S, A, S)
    eta: np.ndarray
    kl: np.ndarray
    status: np.ndarray


def _cfg(epsilon, dual_cfg):
    base = DEFAULT_DUAL if dual_cfg is None else dual_cfg
    return DualConfig(
        epsilon=float(epsilon), eta_min=base.eta_min, eta_max=base.eta_max,
        tol_kl=base.tol_kl, max_iter=base.max_iter, newton=base.newton,
    )


def robust_rows(v, kernel, epsilon, dual_cfg=None, eta_init=None, soft=False) -> RowSolution:
    """Inner ``inf {q . v : KL(q || p(.|s,a)) <= eps}`` for every row.

    Rows whose values are constant on their support (including deterministic
    rows) return the plain expectation. When the budget exceeds what the
    temperature cap can reach, the sup over eta is attained only as
    eta -> inf and the row value is the minimum of v over the support, with
    the base law restricted to the argmin set as the minimiser.

    ``soft=True`` evaluates the soft-penalty form ``Psi_eta`` at the fixed
    temperature ``eta_init`` instead.
    """
    if epsilon < 0:
        raise DomainError("epsilon must be >= 0")
    v = np.asarray(v, dtype=float)
    n_s, n_a, _ = kernel.shape
    base = kernel.reshape(n_s * n_a, n_s)
    nominal = (kernel @ v).reshape(-1)
    if soft:
        eta = np.broadcast_to(np.asarray(eta_init, float), (n_s, n_a)).reshape(-1)
        vals = np.broadcast_to(v, base.shape)
        mu, logz, q, kl, _ = _tilt_stats(vals, base, eta)
        value = mu - logz / eta
        status = np.zeros(n_s * n_a, dtype=int)
        return RowSolution(value.reshape(n_s, n_a), q.reshape(kernel.shape),
                           eta.reshape(n_s, n_a), kl.reshape(n_s, n_a),
                           status.reshape(n_s, n_a))
    if epsilon == 0:
        zeros = np.zeros((n_s, n_a))
        return RowSolution(nominal.reshape(n_s, n_a), kernel.copy(),
                           zeros, zeros, np.full((n_s, n_a), DEGENERATE))

    cfg = _cfg(epsilon, dual_cfg)
    init = None if eta_init is None else np.asarray(eta_init, float).ravel()
    vals = np.broadcast_to(v, base.shape)
    sol = solve_eta_batch(vals, base, cfg, eta_init=init)
    value = sol.dual_value.copy()
    q = sol.tilted.copy()
    kl = sol.kl.copy()
    status = sol.status.copy()

    deg = status == DEGENERATE
    value[deg] = nominal[deg]
    q[deg] = base[deg]
    kl[deg] = 0.0

    ex = np.flatnonzero(status == EXCEEDS)
    if ex.size:
        support = base[ex] > 0
        vmin = np.min(np.where(support, v[None, :], np.inf), axis=1)
        argmin = support & (v[None, :] <= vmin[:, None])
        w = np.where(argmin, base[ex], 0.0)
        mass = w.sum(axis=1)
        # near-ties leave the limit law outside the ball: the root lies above
        # the cap, so those rows are re-solved on a wider bracket
        fits = -np.log(mass) <= cfg.epsilon
        far = ex[~fits]
        if far.size:
            wide = DualConfig(epsilon=cfg.epsilon, eta_min=cfg.eta_max, eta_max=WIDE_ETA_MAX,
                              tol_kl=cfg.tol_kl, max_iter=max(cfg.max_iter, 400),
                              newton=cfg.newton)
            sol2 = solve_eta_batch(vals[far], base[far], wide)
            value[far] = sol2.dual_value
            q[far] = sol2.tilted
            kl[far] = sol2.kl
            status[far] = sol2.status
            sol.eta[far] = sol2.eta
        ex, w, mass, vmin = ex[fits], w[fits], mass[fits], vmin[fits]
        value[ex] = vmin
        q[ex] = w / mass[:, None]
        kl[ex] = -np.log(mass)
        status[ex] = STATUS_ROW_MIN
    return RowSolution(value.reshape(n_s, n_a), q.reshape(kernel.shape),
                       sol.eta.reshape(n_s, n_a), kl.reshape(n_s, n_a),
                       status.reshape(n_s, n_a))


def robust_q(v, mdp: TabularMdp, epsilon, dual_cfg=None, eta_init=None):
    rows = robust_rows(v, mdp.kernel, epsilon, dual_cfg, eta_init)
    return mdp.rewards + mdp.gamma * rows.value, rows


def robust_evaluation_backup(v, mdp: TabularMdp, policy, epsilon, dual_cfg=None,
                             eta_init=None) -> np.ndarray:
    pi = check_policy(policy, mdp)
    q, _ = robust_q(v, mdp, epsilon, dual_cfg, eta_init)
    return np.sum(pi * q, axis=1)


def greedy(q: np.ndarray) -> np.ndarray:
    """Deterministic greedy policy; ``argmax`` already breaks ties low."""
    return np.eye(q.shape[1])[np.argmax(q, axis=1)]


def robust_optimality_backup(v, mdp: TabularMdp, epsilon, dual_cfg=None, eta_init=None):
    q, _ = robust_q(v, mdp, epsilon, dual_cfg, eta_init)
    return q.max(axis=1), greedy(q)


def robust_value_iteration(mdp: TabularMdp, epsilon, dual_cfg=None, tol_v: float = 1e-8,
                           max_iter: int = 100_000):
    """Iterate the robust optimality operator from ``V = 0``."""
    v = np.zeros(mdp.n_states)
    eta = None
    residual = math.inf
    for it in range(1, max_iter + 1):
        q, rows = robust_q(v, mdp, epsilon, dual_cfg, eta)
        eta = rows.eta
        v_new = q.max(axis=1)
        residual = float(np.max(np.abs(v_new - v)))
        v = v_new
        if residual <= tol_v:
            # one more greedy extraction at the converged values
            q, _ = robust_q(v, mdp, epsilon, dual_cfg, eta)
            return v, greedy(q), it
    raise ConvergenceError("robust value iteration did not converge",
                           residual=residual, iterations=max_iter)


def nominal_policy_evaluation(kernel, rewards, policy, gamma: float, tol: float | None = None):
    """Exact ``V = (I - gamma P_pi)^-1 r_pi`` (``tol`` accepted for API symmetry)."""
    kernel = np.asarray(kernel, float)
    pi = np.asarray(policy, float)
    p_pi = np.einsum("sa,sat->st", pi, kernel)
    r_pi = np.sum(pi * np.asarray(rewards, float), axis=1)
    return np.linalg.solve(np.eye(kernel.shape[0]) - gamma * p_pi, r_pi)


def robust_policy_evaluation(mdp: TabularMdp, policy, epsilon, dual_cfg=None,
                             tol_v: float = 1e-10, max_iter: int = 1000,
                             method: str = "howard"):
    """Fixed point of the robust evaluation operator.

    ``method="howard"`` alternates an adversary step (worst-case rows for the
    current V) with an exact linear evaluation under that kernel; V decreases
    monotonically and the loop stops once the backup residual is below
    ``tol_v``. ``method="vi"`` iterates the backup itself.
    """
    pi = check_policy(policy, mdp)
    if epsilon == 0:
        return nominal_policy_evaluation(mdp.kernel, mdp.rewards, pi, mdp.gamma)
    v = nominal_policy_evaluation(mdp.kernel, mdp.rewards, pi, mdp.gamma)
    eta = None
    residual = math.inf
    for _ in range(max_iter):
        rows = robust_rows(v, mdp.kernel, epsilon, dual_cfg, eta)
        eta = rows.eta
        backup = np.sum(pi * (mdp.rewards + mdp.gamma * rows.value), axis=1)
        residual = float(np.max(np.abs(backup - v)))
        if residual <= tol_v:
            return backup
        if method == "vi":
            v = backup
        else:
            v = nominal_policy_evaluation(rows.tilted, mdp.rewards, pi, mdp.gamma)
    raise ConvergenceError("robust policy evaluation did not converge",
                           residual=residual, iterations=max_iter)


def extract_worst_case_kernel(mdp: TabularMdp, policy, v_robust, epsilon,
                              dual_cfg=None) -> WorstCaseKernel:
    check_policy(policy, mdp)
    rows = robust_rows(v_robust, mdp.kernel, epsilon, dual_cfg)
    return WorstCaseKernel(rows.tilted, rows.eta, rows.kl, rows.status)


def occupancy_measure(kernel, policy, gamma: float, initial_dist) -> np.ndarray:
    """``d = (1 - gamma) mu0^T (I - gamma P_pi)^-1``."""
    kernel = np.asarray(kernel, float)
    p_pi = np.einsum("sa,sat->st", np.asarray(policy, float), kernel)
    n = kernel.shape[0]
    d = (1 - gamma) * np.linalg.solve((np.eye(n) - gamma * p_pi).T,
                                      np.asarray(initial_dist, float))
    return np.maximum(d, 0.0)


def robust_return(mdp: TabularMdp, policy, epsilon, dual_cfg=None):
    """``J(pi, p_wc)``, robust values and the worst-case kernel."""
    v = robust_policy_evaluation(mdp, policy, epsilon, dual_cfg)
    wc = extract_worst_case_kernel(mdp, policy, v, epsilon, dual_cfg)
    return float(mdp.initial_dist @ v), v, wc


def rpdl_terms(mdp: TabularMdp, pi, pi_prime, epsilon, dual_cfg=None,
               advantage_kernel: str = "pi"):
    """Both sides of the robust performance-difference relation.

    The left side is ``J(pi', p_wc(pi')) - J(pi, p_wc(pi))``. The right side
    averages ``A(s, a) = r + gamma p(.|s,a) . V - V(s)`` over the robust
    occupancy of ``pi'`` (state) and ``pi'`` (action), scaled by 1/(1-gamma),
    where ``V`` is the robust value of ``pi``. ``advantage_kernel="pi"``
    takes ``p = p_wc(pi)``, i.e. the robust advantage of ``pi``;
    ``"pi_prime"`` takes ``p = p_wc(pi')``, for which the relation is the
    usual telescoping identity.
    """
    j, v, wc = robust_return(mdp, pi, epsilon, dual_cfg)
    j_p, _, wc_p = robust_return(mdp, pi_prime, epsilon, dual_cfg)
    kern = wc.kernel if advantage_kernel == "pi" else wc_p.kernel
    if advantage_kernel not in ("pi", "pi_prime"):
        raise DomainError("advantage_kernel must be 'pi' or 'pi_prime'")
    adv = mdp.rewards + mdp.gamma * np.einsum("sat,t->sa", kern, v) - v[:, None]
    d = occupancy_measure(wc_p.kernel, pi_prime, mdp.gamma, mdp.initial_dist)
    rhs = float(np.sum(d[:, None] * np.asarray(pi_prime) * adv)) / (1 - mdp.gamma)
    return j_p - j, rhs


def rpdl_residual(mdp: TabularMdp, pi, pi_prime, epsilon, dual_cfg=None,
                  advantage_kernel: str = "pi") -> float:
    lhs, rhs = rpdl_terms(mdp, pi, pi_prime, epsilon, dual_cfg, advantage_kernel)
    return abs(lhs - rhs)


def value_drop_check(mdp: TabularMdp, policy, epsilon, dual_cfg=None):
    """``gap = V_nominal - V_robust`` and ``gamma/(1-gamma) osc(V) sqrt(2 eps)``."""
    pi = check_policy(policy, mdp)
    v_nom = nominal_policy_evaluation(mdp.kernel, mdp.rewards, pi, mdp.gamma)
    v_rob = robust_policy_evaluation(mdp, pi, epsilon, dual_cfg)
    osc = float(v_nom.max() - v_nom.min())
    bound = mdp.gamma / (1 - mdp.gamma) * osc * math.sqrt(2 * epsilon)
    return v_nom - v_rob, bound


def nominal_value_iteration(mdp: TabularMdp, tol_v: float = 1e-10, max_iter: int = 100_000):
    v = np.zeros(mdp.n_states)
    for it in range(1, max_iter + 1):
        q = mdp.rewards + mdp.gamma * mdp.kernel @ v
        v_new = q.max(axis=1)
        if np.max(np.abs(v_new - v)) <= tol_v:
            q = mdp.rewards + mdp.gamma * mdp.kernel @ v_new
            return v_new, greedy(q), it
        v = v_new
    raise ConvergenceError("value iteration did not converge", iterations=max_iter)
