"""Finite MDPs with an optional one-parameter kernel perturbation family."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import DomainError

ROW_TOL = 1e-12


@dataclass(frozen=True)
class PerturbationFamily:
    """Kernels ``(1 - p) * base + p * alt``; scaling multiplies ``p``.

    For a slippery gridworld ``base`` is the intended move and ``alt`` the
    slip distribution; for a chain ``alt`` is "stay in place".
    """

    name: str
    base: np.ndarray
    alt: np.ndarray
    prob: float

    def kernel(self, scale: float = 1.0) -> np.ndarray:
        p = self.prob * scale
        if p < 0 or p > 1:
            raise DomainError(f"scale {scale} gives perturbation probability {p} outside [0, 1]")
        return (1.0 - p) * self.base + p * self.alt

    def to_dict(self) -> dict:
        return {"name": self.name, "base": self.base.tolist(),
                "alt": self.alt.tolist(), "prob": self.prob}

    @classmethod
    def from_dict(cls, d: dict) -> PerturbationFamily:
        return cls(d["name"], np.asarray(d["base"], float),
                   np.asarray(d["alt"], float), float(d["prob"]))


def check_kernel(kernel: np.ndarray, what: str = "kernel") -> None:
    if kernel.ndim != 3 or kernel.shape[0] != kernel.shape[2]:
        raise DomainError(f"{what} must have shape [S][A][S], got {kernel.shape}")
    if not np.all(np.isfinite(kernel)):
        raise DomainError(f"{what} has non-finite entries")
    bad = np.argwhere(kernel.min(axis=2) < 0)
    if bad.size:
        s, a = bad[0]
        raise DomainError(f"{what} row [s={s}][a={a}] has a negative entry")
    sums = kernel.sum(axis=2)
    bad = np.argwhere(np.abs(sums - 1.0) > ROW_TOL)
    if bad.size:
        s, a = bad[0]
        raise DomainError(f"{what} row [s={s}][a={a}] sums to {sums[s, a]!r}, not 1")


@dataclass(frozen=True)
class TabularMdp:
    kernel: np.ndarray
    rewards: np.ndarray
    gamma: float
    initial_dist: np.ndarray
    # absorbing states that end an episode during rollouts
    terminal: np.ndarray = None
    family: PerturbationFamily | None = field(default=None, compare=False)

    def __post_init__(self):
        kernel = np.asarray(self.kernel, dtype=float)
        rewards = np.asarray(self.rewards, dtype=float)
        mu0 = np.asarray(self.initial_dist, dtype=float)
        check_kernel(kernel)
        n_s, n_a = kernel.shape[:2]
        if rewards.shape != (n_s, n_a):
            raise DomainError(f"rewards must have shape ({n_s}, {n_a}), got {rewards.shape}")
        bad = np.argwhere((rewards < 0) | (rewards > 1) | ~np.isfinite(rewards))
        if bad.size:
            s, a = bad[0]
            raise DomainError(f"reward [s={s}][a={a}] = {rewards[s, a]} outside [0, 1]")
        if not 0 < self.gamma < 1:
            raise DomainError(f"gamma must lie strictly inside (0, 1), got {self.gamma}")
        if mu0.shape != (n_s,) or np.any(mu0 < 0) or abs(mu0.sum() - 1) > ROW_TOL:
            raise DomainError("initial_dist must be a probability vector over states")
        term = (np.zeros(n_s, bool) if self.terminal is None
                else np.asarray(self.terminal, dtype=bool))
        if term.shape != (n_s,):
            raise DomainError("terminal must be a boolean vector over states")
        object.__setattr__(self, "kernel", kernel)
        object.__setattr__(self, "rewards", rewards)
        object.__setattr__(self, "initial_dist", mu0)
        object.__setattr__(self, "terminal", term)
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def n_states(self) -> int:
        return self.kernel.shape[0]

    @property
    def n_actions(self) -> int:
        return self.kernel.shape[1]

    def with_kernel(self, kernel) -> TabularMdp:
        return TabularMdp(kernel, self.rewards, self.gamma, self.initial_dist,
                          self.terminal, self.family)

    def to_dict(self) -> dict:
        d = {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "kernel": self.kernel.tolist(),
            "rewards": self.rewards.tolist(),
            "gamma": self.gamma,
            "initial_dist": self.initial_dist.tolist(),
            "terminal": self.terminal.astype(int).tolist(),
        }
        if self.family is not None:
            d["family"] = self.family.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TabularMdp:
        required = ("n_states", "n_actions", "kernel", "rewards", "gamma", "initial_dist")
        missing = [k for k in required if k not in d]
        if missing:
            raise DomainError(f"MDP document is missing {missing}")
        kernel = np.asarray(d["kernel"], dtype=float)
        if kernel.shape[:2] != (d["n_states"], d["n_actions"]):
            raise DomainError(
                f"kernel shape {kernel.shape} disagrees with n_states={d['n_states']}, "
                f"n_actions={d['n_actions']}")
        family = PerturbationFamily.from_dict(d["family"]) if "family" in d else None
        return cls(kernel, d["rewards"], d["gamma"], d["initial_dist"],
                   d.get("terminal"), family)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> TabularMdp:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise DomainError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(doc)


def check_policy(policy, mdp: TabularMdp) -> np.ndarray:
    pi = np.asarray(policy, dtype=float)
    if pi.shape != (mdp.n_states, mdp.n_actions):
        raise DomainError(f"policy must have shape ({mdp.n_states}, {mdp.n_actions})")
    bad = np.flatnonzero((np.abs(pi.sum(axis=1) - 1) > ROW_TOL) | np.any(pi < 0, axis=1))
    if bad.size:
        raise DomainError(f"policy row s={bad[0]} is not a distribution")
    return pi


def deterministic_policy(actions, n_actions: int) -> np.ndarray:
    return np.eye(n_actions)[np.asarray(actions, dtype=int)]


def random_mdp(rng, n_states: int, n_actions: int, gamma: float = 0.9,
               sparsity: float = 0.0) -> TabularMdp:
    """Dirichlet kernel rows (optionally with zeroed entries), uniform rewards."""
    kernel = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    if sparsity > 0:
        mask = rng.random(kernel.shape) < sparsity
        mask[..., 0] = False
        kernel = np.where(mask, 0.0, kernel)
        kernel /= kernel.sum(axis=2, keepdims=True)
    rewards = rng.random((n_states, n_actions))
    mu0 = rng.dirichlet(np.ones(n_states))
    return TabularMdp(kernel, rewards, gamma, mu0)


def random_policy(rng, n_states: int, n_actions: int) -> np.ndarray:
    return rng.dirichlet(np.ones(n_actions), size=n_states)
