"""Small tabular environments with a slip (or stay) perturbation family."""
from __future__ import annotations

import numpy as np

from .mdp import PerturbationFamily, TabularMdp

# up, right, down, left
MOVES = ((-1, 0), (0, 1), (1, 0), (0, -1))


def gridworld(layout: list[str], slip: float = 0.1, gamma: float = 0.95,
              goal_reward: float = 1.0) -> TabularMdp:
    """Grid from a text layout: ``S`` start (several share the mass), ``G`` goal, ``C`` cliff, ``#`` wall, ``~`` thin ice.

    Acting in ``G`` pays ``goal_reward`` and moves to an absorbing terminal
    state; cliffs are absorbing with zero reward. A slip replaces the chosen
    move by one of the two perpendicular moves, each with probability slip/2.
    On thin ice a slip drops into the sink with zero reward instead.
    One extra state (the last index) is the terminal sink.
    """
    rows, cols = len(layout), len(layout[0])
    cells = [(r, c) for r in range(rows) for c in range(cols) if layout[r][c] != "#"]
    index = {rc: i for i, rc in enumerate(cells)}
    n = len(cells) + 1
    sink = n - 1
    n_a = len(MOVES)
    intended = np.zeros((n, n_a, n))
    slipped = np.zeros((n, n_a, n))
    rewards = np.zeros((n, n_a))
    terminal = np.zeros(n, bool)
    terminal[sink] = True
    mu0 = np.zeros(n)

    def target(rc, move):
        r, c = rc[0] + move[0], rc[1] + move[1]
        if 0 <= r < rows and 0 <= c < cols and layout[r][c] != "#":
            return index[(r, c)]
        return index[rc]

    for rc, i in index.items():
        ch = layout[rc[0]][rc[1]]
        if ch == "S":
            mu0[i] = 1.0
        if ch in "GC":
            intended[i, :, sink] = 1.0
            slipped[i, :, sink] = 1.0
            terminal[i] = ch == "C"
            if ch == "G":
                rewards[i, :] = goal_reward
            continue
        for a, move in enumerate(MOVES):
            intended[i, a, target(rc, move)] = 1.0
            if ch == "~":
                # thin ice: a slip falls through
                slipped[i, a, sink] = 1.0
                continue
            for side in ((a + 1) % 4, (a + 3) % 4):
                slipped[i, a, target(rc, MOVES[side])] += 0.5
    intended[sink, :, sink] = 1.0
    slipped[sink, :, sink] = 1.0
    if mu0.sum() == 0:
        mu0[0] = 1.0
    mu0 /= mu0.sum()
    family = PerturbationFamily("slip_scale", intended, slipped, slip)
    return TabularMdp(family.kernel(1.0), rewards, gamma, mu0, terminal, family)


# bottom row is a cliff between start and goal; the safe route hugs the top
CLIFF_LAYOUT = [
    "......",
    "......",
    "S....G",
    "CCCCCC",
]


def cliff_gridworld(slip: float = 0.1, gamma: float = 0.95) -> TabularMdp:
    return gridworld(CLIFF_LAYOUT, slip=slip, gamma=gamma)


def chain(n: int = 5, stay: float = 0.2, gamma: float = 0.9) -> TabularMdp:
    """Actions: 0 = advance, 1 = reset to start. Reward 1 for acting at the end."""
    n_a = 2
    advance = np.zeros((n, n_a, n))
    stay_k = np.zeros((n, n_a, n))
    for s in range(n):
        advance[s, 0, min(s + 1, n - 1)] = 1.0
        advance[s, 1, 0] = 1.0
        stay_k[s, 0, s] = 1.0
        stay_k[s, 1, 0] = 1.0
    rewards = np.zeros((n, n_a))
    rewards[n - 1, 0] = 1.0
    mu0 = np.eye(n)[0]
    family = PerturbationFamily("stay_scale", advance, stay_k, stay)
    return TabularMdp(family.kernel(1.0), rewards, gamma, mu0, None, family)


# one thin-ice cell on the short route, a two-step-longer detour above it; at
# slip 0.1 the ice wins nominally and loses once slip grows by a quarter
BRIDGE_LAYOUT = [
    "...",
    "S~G",
    "###",
]


def bridge_gridworld(slip: float = 0.1, gamma: float = 0.95) -> TabularMdp:
    return gridworld(BRIDGE_LAYOUT, slip=slip, gamma=gamma)
