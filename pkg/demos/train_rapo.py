"""Train RAPO and plain PPO on the bridge gridworld and compare worst cases.

Both learners see the same rollouts for the same seed. RAPO bootstraps from
a KL-ball worst case over sampled successors and shifts the model mixture
toward adverse slip scales; PPO trains on the nominal kernel alone.

Run: python3 demos/train_rapo.py [seed]   (about 20 s)
"""
from __future__ import annotations

import sys

import numpy as np

from rapo.ensemble import build_ensemble
from rapo.envs import bridge_gridworld
from rapo.rapo import (
    SoftmaxPolicy,
    TrainConfig,
    collect_rollout,
    make_rng,
    ppo_train,
    rapo_train,
    robustness_sweep,
    value_heatmap,
)

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
scales = np.linspace(0.5, 1.5, 11)
mdp = bridge_gridworld()
ens = build_ensemble(mdp, scales)
cfg = TrainConfig(seed=seed)

rapo = rapo_train(mdp, ens, cfg, snapshot_every=50)
ppo = ppo_train(mdp, cfg)

print("final mixture over slip scales:")
print("  " + " ".join(f"{w:.3f}" for w in rapo.mixture_history[-1].weights))

sweeps = {"RAPO": robustness_sweep(rapo.policy.probs(), mdp, scales),
          "PPO": robustness_sweep(ppo.policy.probs(), mdp, scales)}
print("\nscale      RAPO       PPO")
for i, s in enumerate(scales):
    print(f"{s:5.2f}  {sweeps['RAPO'].mean[i]:8.4f}  {sweeps['PPO'].mean[i]:8.4f}")
print(f"worst  {sweeps['RAPO'].mean.min():8.4f}  {sweeps['PPO'].mean.min():8.4f}")

# the critic's value floor across scales, at each snapshot
probe = collect_rollout(mdp, SoftmaxPolicy.zeros(mdp.n_states, mdp.n_actions), 256,
                        make_rng(123))
pols = [p for _, p in rapo.snapshots]
hm = value_heatmap([p.critic for p in pols], [p.probs() for p in pols], mdp, scales,
                   probe.states, probe.actions, [u for u, _ in rapo.snapshots])
print("\nupdate  floor over scales  weakest scale")
for u, f, j in zip(hm.updates, hm.floor, np.argmin(hm.values, axis=1)):
    print(f"{u:6d}  {f:17.4f}  {scales[j]:13.2f}")
