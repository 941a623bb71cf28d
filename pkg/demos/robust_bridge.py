"""Robust planning on the bridge gridworld.

The start cell has two routes to the goal: straight across a thin-ice cell,
where a slip falls through, or a detour two steps longer. Nominal planning
takes the ice; robust planning, or a larger slip, takes the detour.

Run: python3 demos/robust_bridge.py
"""
from __future__ import annotations

import numpy as np

from rapo.envs import BRIDGE_LAYOUT, bridge_gridworld
from rapo.rapo import robustness_sweep
from rapo.robust_mdp import nominal_value_iteration, robust_value_iteration

ACTIONS = "^>v<"
mdp = bridge_gridworld()
start = int(np.argmax(mdp.initial_dist))
print("\n".join(BRIDGE_LAYOUT), "\n")

plans = {}
_, g, _ = nominal_value_iteration(mdp)
plans["nominal"] = g
for eps in (0.05, 0.2):
    _, g, _ = robust_value_iteration(mdp, eps)
    plans[f"robust eps={eps}"] = g
for name, g in plans.items():
    print(f"{name:16s} first move from S: {ACTIONS[int(np.argmax(g[start]))]}")

scales = np.linspace(0.5, 1.5, 11)
print("\nexact return across slip scales")
print("scale  " + "  ".join(f"{n:>16s}" for n in plans))
tables = {n: robustness_sweep(g, mdp, scales) for n, g in plans.items()}
for i, s in enumerate(scales):
    print(f"{s:5.2f}  " + "  ".join(f"{t.mean[i]:16.4f}" for t in tables.values()))
print("worst  " + "  ".join(f"{t.mean.min():16.4f}" for t in tables.values()))
