from __future__ import annotations

import numpy as np
import pytest

from fedslack import nn
from fedslack.aggregation import (AggregationMode, AggregationPolicy, alpha_slack_loss,
                                  fedavg_aggregate, scaffold_server_update,
                                  slack_aggregate, slack_weights,
                                  sort_by_weighted_loss)
from fedslack.errors import AggregationError
from fedslack.local import ClientUpdate

LAYOUT = (("dense0.W", (1, 1)), ("dense0.b", (1,)))


def update(cid, values, loss, n, total):
    return ClientUpdate(cid, nn.ParamVector(np.asarray(values, dtype=float), LAYOUT),
                        loss, n, total)


def scalar_updates(thetas, losses, ns):
    total = sum(ns)
    return [update(i, [v, 0.0], l, n, total)
            for i, (v, l, n) in enumerate(zip(thetas, losses, ns))]


def brute_force_weighted_mean(values, weights):
    # oracle: plain python accumulation
    out = [0.0] * len(values[0])
    for v, w in zip(values, weights):
        for i in range(len(v)):
            out[i] += w * v[i]
    return np.array(out)


def test_fedavg_idempotent_on_identical_params():
    ups = scalar_updates([3.5, 3.5, 3.5], [0.1, 0.2, 0.3], [5, 7, 2])
    agg = fedavg_aggregate(ups)
    assert agg.values[0] == pytest.approx(3.5, rel=1e-15)


def test_fedavg_matches_oracle():
    ups = scalar_updates([0.0, 4.0], [0.1, 0.2], [1, 3])
    agg = fedavg_aggregate(ups)
    oracle = brute_force_weighted_mean([[0.0, 0.0], [4.0, 0.0]], [0.25, 0.75])
    np.testing.assert_allclose(agg.values, oracle, atol=1e-12)
    assert agg.values[0] == pytest.approx(3.0)


def test_fedavg_equal_n_is_mean():
    ups = scalar_updates([1.0, 2.0, 6.0], [0.1, 0.2, 0.3], [1, 1, 1])
    assert fedavg_aggregate(ups).values[0] == pytest.approx(3.0, rel=1e-15)


def test_fedavg_empty_errors():
    with pytest.raises(AggregationError):
        fedavg_aggregate([])


def test_sort_by_weighted_loss():
    ups = scalar_updates([0, 0, 0], [0.3, 0.1, 0.2], [1, 1, 1])
    assert sort_by_weighted_loss(ups) == [1, 2, 0]


def test_sort_tie_broken_by_client_id():
    ups = scalar_updates([0, 0, 0], [0.2, 0.2, 0.2], [1, 1, 1])
    assert sort_by_weighted_loss(ups) == [0, 1, 2]


def test_sort_uses_sample_weighting():
    # N=(10,1), L=(0.1,0.5): weighted losses 10/11*0.1=0.0909 vs 1/11*0.5=0.0454
    ups = [update(0, [0, 0], 0.1, 10, 11), update(1, [0, 0], 0.5, 1, 11)]
    assert sort_by_weighted_loss(ups) == [1, 0]


def test_sort_rejects_nan():
    ups = scalar_updates([0, 0], [np.nan, 0.1], [1, 1])
    with pytest.raises(AggregationError):
        sort_by_weighted_loss(ups)


def test_slack_weights_equal_n_pattern():
    # K=5 equal N, alpha=1/6 -> ratio 1.4; client 2 smallest loss
    # weights (1,1,1.4,1,1)/5.4
    ups = scalar_updates([0] * 5, [0.5, 0.4, 0.1, 0.3, 0.2], [10] * 5)
    policy = AggregationPolicy(AggregationMode.SFAT, alpha=1 / 6, k_hat=1)
    sw = slack_weights(ups, policy)
    assert sw.ratio == pytest.approx(1.4, rel=1e-12)
    expected = np.array([1, 1, 1.4, 1, 1]) / 5.4
    np.testing.assert_allclose(sw.weights, expected, atol=1e-9)
    np.testing.assert_allclose(
        sw.weights, [0.18519, 0.18519, 0.25926, 0.18519, 0.18519], atol=1e-5)
    assert sw.top_ids == [2]


def test_slack_weights_alpha_zero_is_fedavg():
    ups = scalar_updates([0] * 4, [0.4, 0.1, 0.3, 0.2], [3, 5, 2, 10])
    policy = AggregationPolicy(AggregationMode.SFAT, alpha=0.0, k_hat=2)
    sw = slack_weights(ups, policy)
    n = np.array([3, 5, 2, 10], dtype=float)
    assert np.array_equal(sw.weights, n / n.sum())


def test_re_sfat_mirrors_top_choice():
    ups = scalar_updates([0] * 5, [0.5, 0.4, 0.1, 0.3, 0.2], [10] * 5)
    policy = AggregationPolicy(AggregationMode.RE_SFAT, alpha=1 / 6, k_hat=1)
    sw = slack_weights(ups, policy)
    assert sw.top_ids == [0]  # largest loss
    expected = np.array([1.4, 1, 1, 1, 1]) / 5.4
    np.testing.assert_allclose(sw.weights, expected, atol=1e-9)


def test_slack_weights_khat_constraint():
    ups = scalar_updates([0] * 4, [0.1, 0.2, 0.3, 0.4], [1] * 4)
    policy = AggregationPolicy(AggregationMode.SFAT, alpha=0.2, k_hat=3)
    with pytest.raises(AggregationError):
        slack_weights(ups, policy)


def test_invalid_alpha():
    with pytest.raises(AggregationError):
        AggregationPolicy(AggregationMode.SFAT, alpha=1.0, k_hat=1)
    ups = scalar_updates([0, 0], [0.1, 0.2], [1, 1])
    policy = AggregationPolicy(AggregationMode.SFAT, alpha=0.2, k_hat=1)
    with pytest.raises(AggregationError):
        slack_weights(ups, policy, alpha=-0.1)


def test_slack_aggregate_hand_case():
    # two clients equal N, theta (0, 10), alpha=1/3 -> r=2, client 0 smaller loss
    ups = scalar_updates([0.0, 10.0], [0.1, 0.9], [1, 1])
    policy = AggregationPolicy(AggregationMode.SFAT, alpha=1 / 3, k_hat=1)
    agg = slack_aggregate(ups, policy)
    assert agg.values[0] == pytest.approx(10.0 / 3.0, rel=1e-12)
    oracle = brute_force_weighted_mean([[0.0, 0.0], [10.0, 0.0]], [2 / 3, 1 / 3])
    np.testing.assert_allclose(agg.values, oracle, atol=1e-12)


def test_slack_aggregate_alpha_zero_equals_fedavg_bitwise():
    rng = np.random.default_rng(0)
    for _ in range(50):
        k = int(rng.integers(2, 8))
        ns = rng.integers(1, 50, size=k).tolist()
        ups = scalar_updates(rng.normal(size=k).tolist(),
                             rng.uniform(size=k).tolist(), ns)
        base = fedavg_aggregate(ups)
        for policy in [AggregationPolicy(AggregationMode.FAT, 0.0, 0),
                       AggregationPolicy(AggregationMode.SFAT, 0.0, k // 2),
                       AggregationPolicy(AggregationMode.SFAT, 0.3, 0)]:
            agg = slack_aggregate(ups, policy)
            assert np.array_equal(agg.values, base.values)


def test_slack_aggregate_idempotent():
    ups = scalar_updates([2.0, 2.0, 2.0, 2.0], [0.4, 0.3, 0.2, 0.1], [1, 2, 3, 4])
    policy = AggregationPolicy(AggregationMode.SFAT, alpha=0.5, k_hat=2)
    assert slack_aggregate(ups, policy).values[0] == pytest.approx(2.0, rel=1e-15)


def test_alpha_slack_loss_hand_values():
    # (0.5, 1.5), alpha=0.5, k_hat=1 -> 1.5*0.5 + 0.5*1.5 = 1.5
    assert alpha_slack_loss([0.5, 1.5], 0.5, 1) == pytest.approx(1.5, abs=1e-12)
    assert alpha_slack_loss([0.5, 1.5], 0.0, 1) == pytest.approx(2.0, abs=1e-12)
    assert alpha_slack_loss([0.5, 1.5], 0.25, 1) == pytest.approx(1.75, abs=1e-12)
    # order independence: same result for both input orderings
    assert alpha_slack_loss([1.5, 0.5], 0.5, 1) == pytest.approx(1.5, abs=1e-12)


def test_alpha_slack_loss_lower_bound_property():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        k = int(rng.integers(2, 13))
        wl = rng.uniform(0, 2, size=k)
        alpha = float(rng.uniform(0, 0.999))
        k_hat = int(rng.integers(0, k // 2 + 1))
        assert alpha_slack_loss(wl, alpha, k_hat) <= wl.sum() + 1e-12
        assert alpha_slack_loss(wl, 0.0, k_hat) == pytest.approx(wl.sum(), abs=1e-12)


def test_alpha_slack_loss_monotone_in_alpha():
    rng = np.random.default_rng(2)
    for _ in range(200):
        k = int(rng.integers(2, 13))
        wl = rng.uniform(0.01, 2, size=k)
        alphas = np.arange(0.0, 1.0, 0.1)
        for k_hat in range(k // 2 + 1):
            vals = [alpha_slack_loss(wl, a, k_hat) for a in alphas]
            assert all(a >= b - 1e-12 for a, b in zip(vals, vals[1:]))
            if k_hat > 0:
                # distinct positive losses make the decrease strict
                assert all(a > b for a, b in zip(vals, vals[1:]))


def test_alpha_slack_loss_khat_tightens_the_bound():
    # for non-negative losses, a larger top set moves mass into the (1+a)
    # group, so the relaxed value climbs back toward the plain sum while
    # always staying a lower bound
    rng = np.random.default_rng(5)
    for _ in range(200):
        k = int(rng.integers(2, 13))
        wl = rng.uniform(0.01, 2, size=k)
        for alpha in (0.3, 0.7):
            vals = [alpha_slack_loss(wl, alpha, kh) for kh in range(k // 2 + 1)]
            assert all(b >= a - 1e-12 for a, b in zip(vals, vals[1:]))
            assert all(v <= wl.sum() + 1e-12 for v in vals)


def test_slack_weights_simplex_and_ratio():
    rng = np.random.default_rng(3)
    for _ in range(100):
        k = int(rng.integers(2, 10))
        ns = rng.integers(1, 100, size=k).tolist()
        ups = scalar_updates(rng.normal(size=k).tolist(),
                             rng.uniform(size=k).tolist(), ns)
        alpha = float(rng.uniform(0.01, 0.95))
        k_hat = int(rng.integers(1, k // 2 + 1)) if k >= 2 else 0
        mode = AggregationMode.SFAT if rng.random() < 0.5 else AggregationMode.RE_SFAT
        sw = slack_weights(ups, AggregationPolicy(mode, alpha, k_hat))
        assert sw.weights.sum() == pytest.approx(1.0, abs=1e-9)
        top = set(sw.top_ids)
        per_sample = sw.weights / np.array(ns, dtype=float)
        for i in range(k):
            for j in range(k):
                if ups[i].client_id in top and ups[j].client_id not in top:
                    assert per_sample[i] / per_sample[j] == pytest.approx(
                        (1 + alpha) / (1 - alpha), abs=1e-9)


def test_permutation_equivariance():
    rng = np.random.default_rng(4)
    thetas = rng.normal(size=5).tolist()
    losses = [0.5, 0.1, 0.4, 0.2, 0.3]
    ns = [4, 9, 2, 7, 5]
    ups = scalar_updates(thetas, losses, ns)
    policy = AggregationPolicy(AggregationMode.SFAT, alpha=0.25, k_hat=2)
    sw = slack_weights(ups, policy)
    perm = [3, 0, 4, 1, 2]
    ups_p = [ups[i] for i in perm]
    sw_p = slack_weights(ups_p, policy)
    np.testing.assert_allclose(sw_p.weights, sw.weights[perm], atol=1e-15)
    assert sorted(sw_p.top_ids) == sorted(sw.top_ids)


def test_scaffold_server_update():
    c = nn.ParamVector(np.array([1.0, 2.0]), LAYOUT)
    zero = nn.ParamVector(np.zeros(2), LAYOUT)
    out = scaffold_server_update(c, [zero, zero], 2, 4)
    assert np.array_equal(out.values, c.values)

    d = nn.ParamVector(np.array([4.0, -2.0]), LAYOUT)
    out = scaffold_server_update(c, [d], 1, 1)
    np.testing.assert_allclose(out.values, [5.0, 0.0])

    neg = nn.ParamVector(-d.values, LAYOUT)
    out = scaffold_server_update(c, [d, neg], 2, 4)
    np.testing.assert_allclose(out.values, c.values)
