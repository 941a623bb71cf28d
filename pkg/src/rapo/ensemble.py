"""Perturbed-dynamics ensembles around a nominal MDP."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .boltzmann import MixtureWeights
from .exceptions import DomainError
from .kl_dual import DualConfig, solve_eta_batch
from .mdp import PerturbationFamily, TabularMdp, check_kernel


@dataclass(frozen=True)
class EnsembleSpec:
    models: tuple
    scales: np.ndarray
    prior: np.ndarray

    def __post_init__(self):
        models = tuple(np.asarray(m, dtype=float) for m in self.models)
        if not models:
            raise DomainError("an ensemble needs at least one model")
        for k, m in enumerate(models):
            check_kernel(m, what=f"model {k}")
            if m.shape != models[0].shape:
                raise DomainError(f"model {k} has shape {m.shape}, expected {models[0].shape}")
        scales = np.asarray(self.scales, dtype=float)
        prior = (np.full(len(models), 1.0 / len(models)) if self.prior is None
                 else np.asarray(self.prior, dtype=float))
        if scales.shape != (len(models),) or prior.shape != (len(models),):
            raise DomainError("scales and prior must have one entry per model")
        if np.any(prior < 0) or abs(prior.sum() - 1) > 1e-12:
            raise DomainError("prior must lie on the simplex")
        object.__setattr__(self, "models", models)
        object.__setattr__(self, "scales", scales)
        object.__setattr__(self, "prior", prior)

    @property
    def k(self) -> int:
        return len(self.models)

    @property
    def stacked(self) -> np.ndarray:
        return np.stack(self.models)

    def to_dict(self, nominal: TabularMdp | None = None) -> dict:
        d = nominal.to_dict() if nominal is not None else {}
        d.update({"models": [m.tolist() for m in self.models],
                  "scales": self.scales.tolist(), "prior": self.prior.tolist()})
        return d

    @classmethod
    def from_dict(cls, d: dict) -> EnsembleSpec:
        return cls(tuple(d["models"]), d["scales"], d.get("prior"))

    def save(self, path, nominal: TabularMdp | None = None) -> None:
        Path(path).write_text(json.dumps(self.to_dict(nominal)))

    @classmethod
    def load(cls, path) -> EnsembleSpec:
        return cls.from_dict(json.loads(Path(path).read_text()))


def build_ensemble(nominal: TabularMdp, param_grid, perturb: str | PerturbationFamily | None = None,
                   prior=None) -> EnsembleSpec:
    """One model per scale; each multiplies the family's perturbation probability.

    ``perturb`` names the family carried by ``nominal`` (``slip_scale`` for
    gridworlds, ``stay_scale`` for chains) or passes one explicitly; ``None``
    takes the nominal's own.
    """
    family = perturb if isinstance(perturb, PerturbationFamily) else nominal.family
    if family is None:
        raise DomainError("nominal MDP carries no perturbation family")
    if isinstance(perturb, str) and perturb != family.name:
        raise DomainError(f"nominal MDP has family {family.name!r}, not {perturb!r}")
    scales = np.asarray(param_grid, dtype=float).ravel()
    models = tuple(family.kernel(s) for s in scales)
    return EnsembleSpec(models, scales, prior)


def _weights(w) -> np.ndarray:
    return w.weights if isinstance(w, MixtureWeights) else np.asarray(w, dtype=float)


def mixture_kernel(ensemble: EnsembleSpec, w) -> np.ndarray:
    """``sum_k w_k p_k``, renormalised row-wise against rounding."""
    w = _weights(w)
    if w.shape != (ensemble.k,):
        raise DomainError("mixture weights must have one entry per model")
    if np.count_nonzero(w) == 1:
        return ensemble.models[int(np.flatnonzero(w)[0])].copy()
    mix = np.tensordot(w, ensemble.stacked, axes=1)
    return mix / mix.sum(axis=2, keepdims=True)


def sample_next_states(ensemble: EnsembleSpec, w, s, a, m: int, rng) -> np.ndarray:
    """Draw ``k ~ w`` then ``s' ~ p_k(.|s, a)``, ``m`` times; vectorised over (s, a)."""
    w = _weights(w)
    s = np.asarray(s, dtype=int)
    a = np.asarray(a, dtype=int)
    shape = s.shape + (m,)
    if m == 0:
        return np.zeros(shape, dtype=int)
    ks = rng.choice(ensemble.k, size=shape, p=w)
    rows = ensemble.stacked[ks, s[..., None], a[..., None]]  # (..., m, S)
    cdf = np.cumsum(rows, axis=-1)
    u = rng.random(shape)[..., None]
    idx = (u >= cdf).sum(axis=-1)
    return np.minimum(idx, rows.shape[-1] - 1)


@dataclass
class ConvergenceTable:
    k_grid: np.ndarray
    beta_dev: np.ndarray
    value_gap: np.ndarray
    beta_ref: float
    degenerate: bool = False

    def slopes(self):
        if self.degenerate:
            return None
        lk = np.log(self.k_grid)
        return (float(np.polyfit(lk, np.log(self.beta_dev), 1)[0]),
                float(np.polyfit(lk, np.log(self.value_gap), 1)[0]))

    def rows(self):
        return [(int(k), float(b), float(g))
                for k, b, g in zip(self.k_grid, self.beta_dev, self.value_gap)]


def _phi(ref_scores, beta, kappa, chunk: int = 16):
    """Reference dual objective at each beta (uniform weight on the draws)."""
    b = np.atleast_1d(np.asarray(beta, float))
    hmin = ref_scores.min()
    shifted = ref_scores - hmin
    out = np.empty(b.size)
    for i in range(0, b.size, chunk):
        bb = b[i:i + chunk, None]
        out[i:i + chunk] = -np.log(np.mean(np.exp(-bb * shifted[None, :]), axis=1)) / bb[:, 0]
    return hmin + out - kappa / b


def finite_k_convergence(score_sampler, k_grid, kappa: float, trials: int, rng,
                         k_ref: int = 1_000_000, beta_max: float = 1e3,
                         tol: float = 1e-10) -> ConvergenceTable:
    """Deviation of the finite-K Boltzmann temperature from a large-K reference.

    ``score_sampler(rng, n)`` draws n i.i.d. scores. The reference objective
    ``Phi(beta) = -(1/beta) log E[exp(-beta h)] - kappa/beta`` is taken on
    ``k_ref`` draws; the value gap is ``Phi(beta*) - Phi(beta*_K)``.
    """
    k_grid = np.asarray(k_grid, dtype=int)
    if np.any(np.diff(k_grid) <= 0):
        raise DomainError("k_grid must be increasing")
    cfg = DualConfig(epsilon=kappa, eta_max=beta_max, tol_kl=tol, newton=True)
    ref = np.asarray(score_sampler(rng, k_ref), dtype=float)
    if np.ptp(ref) == 0:
        zeros = np.zeros(k_grid.size)
        return ConvergenceTable(k_grid, zeros, zeros.copy(), 0.0, degenerate=True)
    ref_sol = solve_eta_batch(ref[None, :], np.full((1, ref.size), 1.0 / ref.size), cfg)
    beta_ref = float(ref_sol.eta[0])
    phi_ref = _phi(ref, beta_ref, kappa)[0]
    dev = np.empty(k_grid.size)
    gap = np.empty(k_grid.size)
    for i, k in enumerate(k_grid):
        draws = np.asarray(score_sampler(rng, trials * k), dtype=float).reshape(trials, k)
        sol = solve_eta_batch(draws, np.full((trials, k), 1.0 / k), cfg)
        dev[i] = np.mean(np.abs(sol.eta - beta_ref))
        gap[i] = np.mean(np.abs(phi_ref - _phi(ref, sol.eta, kappa)))
    return ConvergenceTable(k_grid, dev, gap, beta_ref)
