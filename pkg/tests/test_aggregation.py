import numpy as np
import pytest

from asyncdfl.aggregation import (
    LAMBDA_MAX,
    LAMBDA_MIN,
    CachedModel,
    RoundParams,
    WeightState,
    aggregate_masked,
    aggregation_round,
    control_gradient,
    control_gradient_own_term,
    importance,
    normalize_weights,
    update_control,
)
from asyncdfl.model import Arch, Batch, effective, gradient, local_sgd, loss


def cached(sender, params, mask=None, loss_value=0.5, samples=100, received_at=0):
    mask = np.ones_like(params) if mask is None else mask
    return CachedModel(sender, params, mask, loss_value, samples, received_at)


def test_worked_example_exact():
    local = np.array([2.0])
    c = [cached(1, np.array([1.0])), cached(2, np.array([3.0]))]
    out = aggregate_masked(local, np.ones(1), c, {0: 0.3, 1: 0.6, 2: 0.1}, 0)
    assert abs(out[0] - 1.5) <= 1e-12


def test_masked_aggregation_renormalizes():
    local = np.array([1.0, 1.0, 5.0])
    lm = np.array([1.0, 1.0, 0.0])
    c = [cached(1, np.array([3.0, 7.0, 2.0]), np.array([1.0, 0.0, 0.0]))]
    out = aggregate_masked(local, lm, c, {0: 0.5, 1: 0.5}, 0)
    # position 0: both keep; position 1: only local; position 2: nobody keeps -> local value
    np.testing.assert_allclose(out, [2.0, 1.0, 5.0])


def test_aggregate_rejects_wrong_length():
    with pytest.raises(ValueError):
        aggregate_masked(np.zeros(3), np.ones(3), [cached(1, np.zeros(2))], {0: 0.5, 1: 0.5}, 0)


def test_importance_monotonicity():
    grid = np.linspace(1, 20, 8)
    for s in (10, 100):
        vals = [importance(s, 1.0, dt, 0.5) for dt in grid]
        assert np.all(np.diff(vals) < 0)
        vals = [importance(s, 1.0, 2.0, l) for l in np.linspace(0.1, 3, 8)]
        assert np.all(np.diff(vals) < 0)
    vals = [importance(s, 1.0, 2.0, 0.5) for s in np.linspace(1, 1000, 8)]
    assert np.all(np.diff(vals) > 0)
    with pytest.raises(ValueError):
        importance(10, 1.0, 0.5, 0.5)
    with pytest.raises(ValueError):
        importance(10, 1.0, 1.0, 0.0)


def test_normalize_weights():
    w = normalize_weights({0: 2.0, 3: 1.0, 5: 1.0})
    assert w == {0: 0.5, 3: 0.25, 5: 0.25}
    with pytest.raises(ValueError):
        normalize_weights({})
    with pytest.raises(ValueError):
        normalize_weights({0: 1.0, 1: 0.0})


def test_update_control_clipped():
    assert update_control(1.0, 0.5, 0.1) == pytest.approx(0.95)
    assert update_control(1.0, 1e9, 1.0) == LAMBDA_MIN
    assert update_control(1.0, -1e9, 1.0) == LAMBDA_MAX


def composed_loss(arch, lambdas, meta, models, masks, local_mask, batch, self_index):
    raw = {k: s * lambdas[k] / (np.sqrt(dt) * l) for k, (s, dt, l) in meta.items()}
    w = normalize_weights(raw)
    keys = list(models)
    values = np.stack([models[k] for k in keys])
    o = np.stack([masks[k] for k in keys])
    ww = np.array([w[k] for k in keys])
    den = ww @ o
    agg = np.where(den > 0, (ww[:, None] * o * values).sum(0) / np.where(den > 0, den, 1), models[self_index])
    return loss(arch, effective(agg, local_mask), None, batch), raw, agg


def random_setup(rng, n_contrib=3):
    arch = Arch("softmax", 3, 3)
    K = arch.size
    b = Batch(rng.standard_normal((15, 3)), rng.integers(3, size=15))
    models = {k: rng.standard_normal(K) for k in range(n_contrib)}
    masks = {k: (rng.random(K) > 0.3).astype(float) for k in range(n_contrib)}
    meta = {k: (int(rng.integers(10, 200)), float(rng.integers(1, 6)), float(rng.uniform(0.2, 2.0)))
            for k in range(n_contrib)}
    lambdas = {k: float(rng.uniform(0.5, 2.0)) for k in range(n_contrib)}
    return arch, b, models, masks, meta, lambdas


def test_control_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(50):
        arch, b, models, masks, meta, lambdas = random_setup(rng)
        _, raw, agg = composed_loss(arch, lambdas, meta, models, masks, masks[0], b, 0)
        g = gradient(arch, effective(agg, masks[0]), None, b) * masks[0]
        for j in models:
            s, dt, l = meta[j]
            analytic = control_gradient(g, models, masks, raw, j, s, dt, l)
            h = 1e-6
            up = {**lambdas, j: lambdas[j] + h}
            dn = {**lambdas, j: lambdas[j] - h}
            fd = (composed_loss(arch, up, meta, models, masks, masks[0], b, 0)[0]
                  - composed_loss(arch, dn, meta, models, masks, masks[0], b, 0)[0]) / (2 * h)
            worst = max(worst, abs(analytic - fd) / max(abs(fd), 1e-8))
    assert worst <= 1e-4


def test_own_term_agrees_when_others_orthogonal_to_gradient():
    rng = np.random.default_rng(1)
    K = 6
    g = np.zeros(K)
    g[:2] = rng.standard_normal(2)
    models = {0: rng.standard_normal(K), 1: np.r_[0.0, 0.0, rng.standard_normal(4)]}
    masks = {k: np.ones(K) for k in models}
    raw = {0: 2.0, 1: 3.0}
    exact = control_gradient(g, models, masks, raw, 0, 50, 2.0, 0.7)
    own = control_gradient_own_term(g, models[0], raw, 0, 50, 2.0, 0.7)
    assert exact == pytest.approx(own, rel=1e-12)


def test_own_term_differs_in_general():
    rng = np.random.default_rng(2)
    arch, b, models, masks, meta, lambdas = random_setup(rng)
    masks = {k: np.ones_like(v) for k, v in masks.items()}
    _, raw, agg = composed_loss(arch, lambdas, meta, models, masks, masks[0], b, 0)
    g = gradient(arch, agg, None, b)
    s, dt, l = meta[1]
    assert control_gradient(g, models, masks, raw, 1, s, dt, l) != pytest.approx(
        control_gradient_own_term(g, models[1], raw, 1, s, dt, l), rel=1e-3)


def make_round_inputs(seed=0):
    rng = np.random.default_rng(seed)
    arch = Arch("softmax", 4, 3)
    x = rng.standard_normal((60, 4))
    y = rng.integers(3, size=60)
    params = 0.1 * rng.standard_normal(arch.size)
    mask = np.ones(arch.size)
    return arch, params, mask, x, y


def test_round_without_cache_is_plain_sgd():
    arch, params, mask, x, y = make_round_inputs()
    hp = RoundParams(lr=0.05, epochs=2, batch_size=10)
    res = aggregation_round(arch, params, mask, x, y, [], WeightState(0), 0, 60, hp, np.random.default_rng(9))
    ref, _, _ = local_sgd(arch, params, mask, x, y, 0.05, 2, 10, np.random.default_rng(9))
    np.testing.assert_array_equal(res.params, ref)
    assert res.weights == {0: 1.0}


@pytest.mark.parametrize("dynamic", [True, False])
def test_round_weights_and_mask(dynamic):
    arch, params, mask, x, y = make_round_inputs(1)
    rng = np.random.default_rng(3)
    mask[[1, 4]] = 0.0
    params *= mask
    c = [cached(j, rng.standard_normal(arch.size), (rng.random(arch.size) > 0.2).astype(float), received_at=0)
         for j in (2, 5)]
    state = WeightState(0)
    hp = RoundParams(lr=0.05, epochs=1, batch_size=20, dynamic_weights=dynamic)
    for t in range(1, 4):
        res = aggregation_round(arch, params, mask, x, y, c, state, t, 60, hp, rng)
        assert abs(sum(res.weights.values()) - 1.0) <= 1e-12
        assert np.all(res.params[mask == 0] == 0.0)
        params = res.params
    if dynamic:
        assert set(state.lambdas) == {0, 2, 5}
        assert res.control_grads
    else:
        assert res.weights == pytest.approx({0: 1 / 3, 2: 1 / 3, 5: 1 / 3})


def test_frozen_lambdas_reduce_to_importance_ratio():
    arch, params, mask, x, y = make_round_inputs(2)
    rng = np.random.default_rng(4)
    c = [cached(1, rng.standard_normal(arch.size), loss_value=0.8, samples=40, received_at=0),
         cached(2, rng.standard_normal(arch.size), loss_value=1.2, samples=90, received_at=1)]
    hp = RoundParams(lr=0.05, epochs=1, batch_size=20, eta_lambda=0.0)
    res = aggregation_round(arch, params, mask, x, y, c, WeightState(0), 5, 60, hp, rng)
    raw = {0: 60 / res.own_loss, 1: 40 / (np.sqrt(5) * 0.8), 2: 90 / (np.sqrt(4) * 1.2)}
    total = sum(raw.values())
    for k, v in raw.items():
        assert res.weights[k] == pytest.approx(v / total, rel=1e-12)


def test_staleness_counter():
    c = cached(1, np.zeros(2), received_at=3)
    assert c.staleness(3) == 1  # clamped
    assert c.staleness(7) == 4
    assert c.mark_aggregated().already_aggregated and not c.already_aggregated
