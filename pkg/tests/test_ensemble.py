import numpy as np
import pytest
from scipy import stats

from rapo.boltzmann import MixtureWeights
from rapo.ensemble import (
    EnsembleSpec,
    build_ensemble,
    finite_k_convergence,
    mixture_kernel,
    sample_next_states,
)
from rapo.envs import chain, cliff_gridworld, gridworld
from rapo.exceptions import DomainError


def test_unit_scale_is_nominal():
    mdp = cliff_gridworld(slip=0.1)
    ens = build_ensemble(mdp, [1.0])
    assert ens.k == 1
    np.testing.assert_array_equal(ens.models[0], mdp.kernel)
    ens = build_ensemble(mdp, [0.5, 1.0, 1.5])
    np.testing.assert_array_equal(ens.models[1], mdp.kernel)


def test_slip_scaling_rows():
    mdp = gridworld(["S..", "...", "..G"], slip=0.1)
    ens = build_ensemble(mdp, [0.5, 1.0, 1.5])
    # centre cell (index 4), action "right": intended lands on index 5,
    # slips go up (index 1) and down (index 7) with half the slip each
    for slip, model in zip([0.05, 0.1, 0.15], ens.models):
        row = model[4, 1]
        assert row[5] == pytest.approx(1 - slip, abs=1e-15)
        assert row[1] == pytest.approx(slip / 2, abs=1e-15)
        assert row[7] == pytest.approx(slip / 2, abs=1e-15)
    zero = build_ensemble(mdp, [0.0]).models[0]
    assert np.all((zero == 0) | (zero == 1))


def test_chain_family_and_bad_scale():
    mdp = chain(4, stay=0.3)
    ens = build_ensemble(mdp, [2.0], perturb="stay_scale")
    assert ens.models[0][0, 0, 0] == pytest.approx(0.6)
    with pytest.raises(DomainError):
        build_ensemble(mdp, [4.0], perturb="stay_scale")
    with pytest.raises(DomainError):
        build_ensemble(mdp, [1.0], perturb="slip_scale")


def test_mixture_kernel_examples():
    mdp = cliff_gridworld()
    ens = build_ensemble(mdp, [0.5, 1.5])
    np.testing.assert_array_equal(mixture_kernel(ens, [0.0, 1.0]), ens.models[1])
    same = EnsembleSpec((mdp.kernel,) * 3, [1, 1, 1], None)
    np.testing.assert_allclose(mixture_kernel(same, np.full(3, 1 / 3)), mdp.kernel, atol=1e-15)
    a = np.array([[[0.2, 0.8]], [[1.0, 0.0]]])
    b = np.array([[[0.6, 0.4]], [[1.0, 0.0]]])
    two = EnsembleSpec((a, b), [0, 1], None)
    mix = mixture_kernel(two, MixtureWeights(np.array([0.75, 0.25]), 0.0))
    np.testing.assert_allclose(mix[0, 0], [0.75 * 0.2 + 0.25 * 0.6, 0.75 * 0.8 + 0.25 * 0.4],
                               atol=1e-15)
    rows = mixture_kernel(ens, [0.3, 0.7]).sum(axis=2)
    np.testing.assert_allclose(rows, 1.0, atol=1e-12)


def test_prior_mixture_of_symmetric_scales_is_nominal():
    mdp = cliff_gridworld(slip=0.1)
    ens = build_ensemble(mdp, np.linspace(0.5, 1.5, 11))
    np.testing.assert_allclose(mixture_kernel(ens, ens.prior), mdp.kernel, atol=1e-12)


def test_sampling_examples():
    mdp = gridworld(["S..", "..G"], slip=0.0)
    ens = build_ensemble(mdp, [1.0, 1.0])
    rng = np.random.default_rng(0)
    out = sample_next_states(ens, [1.0, 0.0], 0, 1, 7, rng)
    np.testing.assert_array_equal(out, [1] * 7)
    assert sample_next_states(ens, [1.0, 0.0], 0, 1, 0, rng).size == 0


def test_sampling_law_chi_square():
    mdp = gridworld(["S..", "...", "..G"], slip=0.2)
    ens = build_ensemble(mdp, [0.5, 2.5])
    w = np.array([0.3, 0.7])
    rng = np.random.default_rng(1)
    n = 100_000
    draws = sample_next_states(ens, w, 4, 1, n, rng)
    expected = mixture_kernel(ens, w)[4, 1] * n
    counts = np.bincount(draws, minlength=expected.size)
    keep = expected > 0
    assert np.all(counts[~keep] == 0)
    _, p = stats.chisquare(counts[keep], expected[keep])
    assert p > 1e-3
    sd = np.sqrt(expected * (1 - expected / n))
    assert np.all(np.abs(counts - expected) <= 3 * sd + 1e-9)


def test_ensemble_roundtrip(tmp_path):
    mdp = cliff_gridworld()
    ens = build_ensemble(mdp, [0.5, 1.0, 1.5], prior=[0.2, 0.5, 0.3])
    ens.save(tmp_path / "ens.json", nominal=mdp)
    back = EnsembleSpec.load(tmp_path / "ens.json")
    np.testing.assert_array_equal(back.stacked, ens.stacked)
    np.testing.assert_array_equal(back.prior, ens.prior)


def test_finite_k_constant_sampler():
    table = finite_k_convergence(lambda rng, n: np.full(n, 0.4), [4, 8], 0.1, 5,
                                 np.random.default_rng(0), k_ref=1000)
    assert table.degenerate and table.slopes() is None
    np.testing.assert_array_equal(table.beta_dev, 0.0)


def test_finite_k_rates_small():
    table = finite_k_convergence(lambda rng, n: rng.random(n), [16, 64, 256], 0.1, 100,
                                 np.random.default_rng(3), k_ref=200_000)
    b, g = table.slopes()
    assert -0.8 < b < -0.3
    assert -1.5 < g < -0.6
    with pytest.raises(DomainError):
        finite_k_convergence(lambda rng, n: rng.random(n), [64, 16], 0.1, 2,
                             np.random.default_rng(0))
