import numpy as np
import pytest

from rapo.ensemble import build_ensemble
from rapo.envs import BRIDGE_LAYOUT, bridge_gridworld, gridworld
from rapo.robust_mdp import nominal_value_iteration


def test_thin_ice_slip_falls_into_sink():
    mdp = gridworld(["S~G"], slip=0.2)
    sink = mdp.n_states - 1
    for a in range(4):
        assert mdp.kernel[1, a, sink] == pytest.approx(0.2)
    # moving right from the ice lands on the goal otherwise
    assert mdp.kernel[1, 1, 2] == pytest.approx(0.8)
    # explicit moves into the border just stay put
    assert mdp.kernel[1, 0, 1] == pytest.approx(0.8)
    assert mdp.rewards[1].max() == 0.0


def test_several_starts_share_mass():
    mdp = gridworld(["SS.", "..G"])
    assert mdp.initial_dist.sum() == pytest.approx(1.0)
    assert np.count_nonzero(mdp.initial_dist) == 2


def test_bridge_route_flips_under_adverse_slip():
    mdp = bridge_gridworld()
    ens = build_ensemble(mdp, [1.0, 1.5])
    start = int(np.argmax(mdp.initial_dist))
    up, right = 0, 1
    nominal = nominal_value_iteration(mdp.with_kernel(ens.models[0]))[1]
    adverse = nominal_value_iteration(mdp.with_kernel(ens.models[1]))[1]
    assert np.argmax(nominal[start]) == right
    assert np.argmax(adverse[start]) == up
    assert sum(row.count("~") for row in BRIDGE_LAYOUT) == 1
