"""How a KL budget moves an expectation from the mean toward the minimum.

Run: python3 demos/kl_ball.py
"""
from __future__ import annotations

import math

import numpy as np

from rapo.kl_dual import DualConfig, ValueSamples, solve_eta

values = np.array([1.0, 0.8, 0.3, 0.0])
samples = ValueSamples(values)
print(f"next-state values {values}, mean {samples.mean:.3f}, min {values.min():.3f}")
print(f"a point mass on the minimum sits ln m = {math.log(values.size):.3f} nats away\n")

print(" epsilon    eta*    robust E[V]   KL achieved   tilted weights")
for eps in (0.0, 0.01, 0.05, 0.1, 0.3, 0.6, 1.0, 1.3):
    sol = solve_eta(samples, DualConfig(epsilon=eps, newton=True))
    w = np.array2string(sol.tilted, precision=3, suppress_small=True)
    print(f"{eps:8.2f} {sol.eta_star:8.3f} {sol.dual_value:12.4f} {sol.kl_achieved:12.4f}   {w}"
          f"   {sol.status.value}")

# the adversary only reweights; it never invents outcomes, so the worst case
# can approach the minimum but a finite budget below ln m never reaches it
