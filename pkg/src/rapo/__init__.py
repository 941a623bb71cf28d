"""KL-robust tabular actor-critic: dual temperatures, Boltzmann ensemble
reweighting, robust dynamic programming and a small amortizing network."""
from __future__ import annotations

from .exceptions import ConfigError, ConvergenceError, DomainError, NumericalFailure
from .kl_dual import DualConfig, DualSolution, ValueSamples, robust_expectation, solve_eta
from .boltzmann import MixtureWeights, boltzmann_weights, solve_beta
from .mdp import TabularMdp
from .ensemble import EnsembleSpec, build_ensemble
from .rapo import TrainConfig, ablation_variant, ppo_train, rapo_train

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ConvergenceError", "DomainError", "NumericalFailure",
    "DualConfig", "DualSolution", "ValueSamples", "robust_expectation", "solve_eta",
    "MixtureWeights", "boltzmann_weights", "solve_beta",
    "TabularMdp", "EnsembleSpec", "build_ensemble",
    "TrainConfig", "ablation_variant", "ppo_train", "rapo_train",
]
