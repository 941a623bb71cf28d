import math

import numpy as np
import pytest

from rapo.advnet import (
    ETA_HI,
    AdamState,
    AdvNetConfig,
    AdvNetParams,
    TargetBatch,
    adam_step,
    advnet_forward,
    advnet_loss_and_grads,
    advnet_update,
    encode_features,
    project_eta_to_budget,
    quadratic_error_probe,
    robust_dual_value,
    robust_targets,
    straight_through,
)
from rapo.exceptions import DomainError
from rapo.kl_dual import DEGENERATE, TIGHT, ValueSamples, dual_objective, empirical_kl

from oracles import eta_from_kl_grid

LN3 = math.log(3.0)
KL_3_1 = 0.75 * math.log(1.5) + 0.25 * math.log(0.5)


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def fd_grad(fn, x, h=1e-5):
    out = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        out[i] = (fn(xp) - fn(xm)) / (2 * h)
    return out


def test_zero_network_outputs_ln2():
    p = AdvNetParams.zeros(5)
    np.testing.assert_allclose(advnet_forward(p, np.random.default_rng(0).random((4, 5))),
                               math.log(2), atol=1e-15)


def test_identical_rows_identical_outputs():
    p = AdvNetParams.init(3, np.random.default_rng(1))
    out = advnet_forward(p, np.tile([0.2, -1.0, 0.5], (3, 1)))
    assert out[0] == out[1] == out[2] and out[0] > 0


def test_forward_gradient_matches_fd():
    rng = np.random.default_rng(2)
    p = AdvNetParams.init(4, rng)
    x = rng.random((3, 4))
    w = rng.normal(size=3)
    from rapo.advnet import _forward_cache, advnet_backward

    eta, cache = _forward_cache(p, x)
    g = advnet_backward(p, cache, w).flat()
    fd = fd_grad(lambda th: w @ advnet_forward(p.with_flat(th), x), p.flat())
    assert np.all(rel_err(fd, g) <= 1e-5)


def test_projection_examples():
    out = project_eta_to_budget([[2.0, 2.0, 2.0]], 1.0, 0.1)
    assert out.status[0] == DEGENERATE and out.eta[0] == ETA_HI
    out = project_eta_to_budget([[0.0, 1.0]], 1.0, KL_3_1, tol=1e-9)
    assert out.eta[0] == pytest.approx(eta_from_kl_grid([0, 1], [0.5, 0.5], KL_3_1), rel=1e-3)
    assert out.eta[0] == pytest.approx(LN3, rel=1e-6)
    eps = empirical_kl(ValueSamples([0.0, 1.0]), LN3)
    warm = project_eta_to_budget([[0.0, 1.0]], LN3, eps, tol=1e-9)
    cold = project_eta_to_budget([[0.0, 1.0]], None, eps, tol=1e-9, newton=False)
    assert warm.iterations[0] <= 2
    assert abs(warm.eta[0] - LN3) <= 1e-6
    assert warm.eta[0] == pytest.approx(cold.eta[0], rel=1e-6)


def test_projection_never_exceeds_budget():
    rng = np.random.default_rng(3)
    v = rng.random((200, 6)) * rng.uniform(0.01, 10, (200, 1))
    init = rng.uniform(1e-3, 100, 200)
    for eps in (0.01, 0.3, 2.0):
        out = project_eta_to_budget(v, init, eps, tol=1e-8)
        assert np.all(out.kl <= eps + 1e-8)
        assert np.all(np.abs(out.kl - eps)[out.status == TIGHT] <= 1e-8)


def test_straight_through():
    eta_t, vjp = straight_through(np.array([0.7, 2.0]), np.array([0.7, 1.3]))
    np.testing.assert_array_equal(eta_t, [0.7, 1.3])
    np.testing.assert_array_equal(vjp(np.array([0.25, -4.0])), [0.25, -4.0])
    # sensitivity of the surrogate eta* - sg(pred) + pred to pred is one
    pred, star = 0.9, 1.4
    h = 1e-6
    assert ((star - pred + (pred + h)) - (star - pred + (pred - h))) / (2 * h) == pytest.approx(
        1.0, abs=1e-9)


def test_downstream_gradient_two_paths():
    # through eta~: d loss/d pred equals d loss/d eta evaluated at eta*
    row = np.array([[0.0, 0.4, 1.0]])
    star = np.array([2.0])
    eps = 0.05
    g_star = (robust_dual_value(row, star + 1e-6, eps) - robust_dual_value(row, star - 1e-6, eps)) / 2e-6
    pred = np.array([0.5])
    f = lambda p: robust_dual_value(row, star - pred + p, eps)
    g_pred = (f(pred + 1e-6) - f(pred - 1e-6)) / 2e-6
    np.testing.assert_allclose(g_pred, g_star, rtol=1e-7)


def test_robust_dual_value_matches_dual_objective():
    for vals, eta, eps in [([0.0, 1.0], 0.7, 0.0), ([0.0, 1.0], LN3, 0.1), ([4.0] * 5, 2.0, 0.2)]:
        got = robust_dual_value([vals], [eta], eps)[0]
        assert got == pytest.approx(dual_objective(ValueSamples(vals), eta, eps), abs=1e-14)


def test_robust_targets():
    np.testing.assert_array_equal(robust_targets([0.3], [1], 0.9, [5.0]), [0.3])
    np.testing.assert_array_equal(robust_targets([0.0], [0], 0.9, [5.0]), [0.9 * 5.0])
    r, d, v = np.array([0.1, 0.5, 1.0]), np.array([0, 1, 0]), np.array([2.0, 3.0, -1.0])
    np.testing.assert_allclose(robust_targets(r, d, 0.8, v), [0.1 + 1.6, 0.5, 1.0 - 0.8])


def _batch(rng, b=6, m=5, d=7, const_rows=0):
    nv = rng.random((b, m))
    nv[:const_rows] = 0.3
    return TargetBatch(rng.random(b), (rng.random(b) < 0.3).astype(float), nv, rng.random((b, d)))


def test_loss_gradients_match_fd():
    rng = np.random.default_rng(4)
    for trial in range(4):
        batch = _batch(rng, const_rows=trial % 2)
        p = AdvNetParams.init(7, rng)
        cfg = AdvNetConfig(epsilon=0.1, lambda_kl=float(trial))
        base = advnet_loss_and_grads(p, batch, cfg)
        # move eta* off the budget so the hinge is active
        star = base.eta_star * np.where(np.arange(6) % 2, 1.4, 0.8)
        deg = np.arange(6) < trial % 2
        kw = dict(eta_star=star, eta_pred_detached=base.eta_pred, degenerate=deg)
        res = advnet_loss_and_grads(p, batch, cfg, **kw)
        fd = fd_grad(lambda th: advnet_loss_and_grads(p.with_flat(th), batch, cfg, **kw).loss,
                     p.flat())
        assert np.all(rel_err(fd, res.grads.flat(), floor=1e-6) <= 1e-4)


def test_constant_rows_give_zero_gradient():
    rng = np.random.default_rng(5)
    batch = TargetBatch(rng.random(3), np.zeros(3), np.full((3, 4), 0.6), rng.random((3, 5)))
    cfg = AdvNetConfig(epsilon=0.1, lambda_kl=0.0, sup_weight=0.0)
    res = advnet_loss_and_grads(AdvNetParams.init(5, rng), batch, cfg)
    np.testing.assert_array_equal(res.grads.flat(), 0.0)


def test_tight_prediction_has_no_penalty():
    rng = np.random.default_rng(6)
    batch = _batch(rng)
    p = AdvNetParams.init(7, rng)
    cfg = AdvNetConfig(epsilon=0.1, lambda_kl=5.0, sup_weight=0.0)
    res = advnet_loss_and_grads(p, batch, cfg)
    no_pen = advnet_loss_and_grads(p, batch, AdvNetConfig(epsilon=0.1, lambda_kl=0.0, sup_weight=0.0))
    assert res.loss == pytest.approx(no_pen.loss, abs=1e-12)


def test_loss_shape_mismatch():
    with pytest.raises(DomainError):
        TargetBatch(np.zeros(3), np.zeros(2), np.zeros((3, 2)), np.zeros((3, 1)))


def test_update_examples():
    rng = np.random.default_rng(7)
    batch = _batch(rng)
    p = AdvNetParams.init(7, rng)
    cfg = AdvNetConfig()
    same, _, _ = advnet_update(p, batch, cfg, steps=0)
    np.testing.assert_array_equal(same.flat(), p.flat())
    zero = p.with_flat(np.zeros(p.flat().size))
    out = adam_step(p, zero, AdamState.like(p), 1e-2)
    np.testing.assert_array_equal(out.flat(), p.flat())


def test_update_learns_temperature_map():
    rng = np.random.default_rng(8)
    n = 8
    nv = rng.random((n, 6)) * np.linspace(0.5, 5, n)[:, None]
    batch = TargetBatch(np.zeros(n), np.zeros(n), nv, np.eye(n))
    cfg = AdvNetConfig(epsilon=0.1)
    p = AdvNetParams.init(n, rng)
    before = advnet_loss_and_grads(p, batch, cfg).diagnostics["eta_abs_err"]
    p2, _, _ = advnet_update(p, batch, cfg, steps=500, step_size=1e-2)
    after = advnet_loss_and_grads(p2, batch, cfg).diagnostics["eta_abs_err"]
    assert after <= 0.5 * before


def test_checkpoint_roundtrip(tmp_path):
    p = AdvNetParams.init(6, np.random.default_rng(9))
    p.save(tmp_path / "ck.json")
    np.testing.assert_array_equal(AdvNetParams.load(tmp_path / "ck.json").flat(), p.flat())


def test_encode_features():
    x = encode_features([1, 0], [2, 0], 3, 3)
    np.testing.assert_array_equal(x, [[0, 1, 0, 0, 0, 1], [1, 0, 0, 1, 0, 0]])
    assert encode_features([1], [2], 3, 3, state_only=True).shape == (1, 3)


def test_quadratic_probe():
    s = ValueSamples([0.0, 0.3, 1.0, 0.8])
    eta, gaps, _ = quadratic_error_probe(s, 0.1, [0.0])
    assert gaps[0] == 0.0
    d = 0.01 * eta
    _, g, _ = quadratic_error_probe(s, 0.1, [d, -d])
    assert g[0] > 0 and g[1] > 0
    assert abs(g[0] - g[1]) <= 10 * d ** 3 * (1 + 1 / eta ** 3)
    _, _, slope = quadratic_error_probe(s, 0.1, eta * np.geomspace(1e-3, 0.1, 8))
    assert 1.8 <= slope <= 2.2
