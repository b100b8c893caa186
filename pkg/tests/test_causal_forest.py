import numpy as np
import pytest

import oracles
from capeforest.causal_forest import (CausalForest, cate_from_cape, cluster_bootstrap,
                                      estimate_ape, resolve_clusters, rr_slope)
from capeforest.exceptions import (BagConfigInvalid, InfeasibleLeafConstraints,
                                   NoResidualVariation, ZeroLocalPriceVariation)


def _resid(n=400, seed=0, hetero=True):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 3))
    p = rng.normal(size=n)
    delta = 1.0 + (X[:, 0] > 0) * 2.0 if hetero else np.full(n, 1.0)
    y = delta * p + rng.normal(scale=0.5, size=n)
    return X, y, p, delta


def test_hand_four_point_cape():
    y = np.array([2.0, -2.0, 1.0, -1.0])
    p = np.array([1.0, -1.0, 1.0, -1.0])
    X = np.arange(4.0)[:, None]
    cf = CausalForest(num_trees=4, min_leaf_size=4, subsample_fraction=1.0,
                      honesty_fraction=None, bag_size=1).fit(X, y, p)
    w = cf.kernel_weights(X[0])
    np.testing.assert_array_equal(w, np.full(4, 0.25))
    assert np.sum(w * y * p) / np.sum(w * p * p) == 1.5
    assert cf.predict(X[:1])[0] == 1.5


def test_single_leaf_cape_equals_ape():
    X, y, p, _ = _resid(n=50, seed=3)
    cf = CausalForest(num_trees=10, min_leaf_size=50, subsample_fraction=1.0,
                      honesty_fraction=None, bag_size=1).fit(X, y, p)
    np.testing.assert_allclose(cf.predict(X[:5]), rr_slope(y, p), atol=1e-10)
    assert cf.ape_ == pytest.approx(rr_slope(y, p), abs=1e-12)


def test_root_split_matches_exhaustive_search():
    rng = np.random.default_rng(8)
    x1 = np.r_[rng.uniform(-2, -0.5, 20), rng.uniform(0.5, 2, 20)]
    X = np.column_stack([x1, rng.uniform(-2, 2, 40)])
    p = rng.normal(size=40)
    y = np.where(x1 < 0, 1.0, -1.0) * p + rng.normal(scale=0.05, size=40)
    cf = CausalForest(num_trees=1, min_leaf_size=5, mtry=2, subsample_fraction=1.0,
                      honesty_fraction=None, bag_size=1).fit(X, y, p)
    root = cf.tree(0)
    _, f, thr = oracles.best_causal_split(X, y, p, 5)
    assert root.split_feature == f == 0
    assert root.split_value == pytest.approx(thr, abs=1e-12)
    assert x1[x1 < 0].max() < root.split_value < x1[x1 > 0].min()


def test_recovers_step_heterogeneity():
    X, y, p, delta = _resid(n=2000, seed=1)
    cf = CausalForest(num_trees=200, random_state=0).fit(X, y, p)
    d = cf.predict_oob()
    assert np.sqrt(np.mean((d - delta) ** 2)) < 0.5
    assert d[X[:, 0] > 0.5].mean() - d[X[:, 0] < -0.5].mean() > 1.5


def test_little_bags_std_positive_and_bounded():
    X, y, p, _ = _resid(n=600, seed=2, hetero=False)
    cf = CausalForest(num_trees=400, bag_size=10, random_state=1).fit(X, y, p)
    est, se = cf.predict_with_std(X[:20])
    assert np.all(se > 0) and np.all(se < 1)
    recs = cf.estimate_cape(X[:3], unit_ids=["a", "b", "c"])
    assert recs[0].unit_id == "a"
    assert recs[0].ci_low < recs[0].delta_hat < recs[0].ci_high


def test_duplicated_data_keeps_variance_away_from_zero():
    X, y, p, _ = _resid(n=300, seed=4, hetero=False)
    cf = CausalForest(num_trees=200, random_state=1).fit(X, y, p)
    cf2 = CausalForest(num_trees=200, random_state=1).fit(
        np.vstack([X, X]), np.r_[y, y], np.r_[p, p])
    _, se = cf.predict_with_std(X[:10])
    _, se2 = cf2.predict_with_std(X[:10])
    assert np.all(se2 > 0.2 * se)


def test_oob_uses_only_bags_without_the_row():
    X, y, p, _ = _resid(n=200, seed=5)
    cf = CausalForest(num_trees=100, bag_size=5, random_state=2).fit(X, y, p)
    i = 11
    w = cf.kernel_weights(X[i], oob_row=i)
    assert w[i] == 0.0
    d = cf.predict_oob()
    assert np.sum(w * y * p) / np.sum(w * p * p) == pytest.approx(d[i], rel=1e-10)


def test_thread_count_and_reload_identical(tmp_path):
    X, y, p, _ = _resid(n=300, seed=6)
    a = CausalForest(num_trees=60, bag_size=6, random_state=4, n_jobs=1).fit(X, y, p)
    b = CausalForest(num_trees=60, bag_size=6, random_state=4, n_jobs=3).fit(X, y, p)
    da, sa = a.predict_oob(with_std=True)
    db, sb = b.predict_oob(with_std=True)
    assert da.tobytes() == db.tobytes() and sa.tobytes() == sb.tobytes()
    a.save(tmp_path / "cf.npz")
    c = CausalForest.load(tmp_path / "cf.npz")
    dc, sc = c.predict_oob(with_std=True)
    assert dc.tobytes() == da.tobytes() and sc.tobytes() == sa.tobytes()


def test_leaf_constraints_respected():
    rng = np.random.default_rng(0)
    n = 300
    X = rng.normal(size=(n, 2))
    treated = rng.random(n) < 0.3
    price = np.where(treated, 3 + rng.normal(size=n), 0.0)
    p = price - price.mean()
    y = 2 * p + rng.normal(size=n)
    cf = CausalForest(num_trees=20, bag_size=2, min_treated_per_leaf=5,
                      min_control_per_leaf=5, honesty_fraction=None,
                      random_state=0).fit(X, y, p, treated)

    def check(node, rows):
        if node.is_leaf:
            return
        left = rows[X[rows, node.split_feature] <= node.split_value]
        right = rows[X[rows, node.split_feature] > node.split_value]
        for part in (left, right):
            assert treated[part].sum() >= 5 and (~treated[part]).sum() >= 5
        check(node.left, left)
        check(node.right, right)

    for b in range(20):
        check(cf.tree(b), np.asarray(cf.forest_.in_sample[b].nonzero()[0]))


def test_infeasible_constraints_raise():
    X, y, p, _ = _resid(n=40)
    with pytest.raises(InfeasibleLeafConstraints):
        CausalForest(num_trees=4, bag_size=2, min_treated_per_leaf=30).fit(
            X, y, p, np.ones(40, bool))


def test_bag_config_errors():
    X, y, p, _ = _resid(n=40)
    with pytest.raises(BagConfigInvalid):
        CausalForest(num_trees=15, bag_size=10).fit(X, y, p)
    cf = CausalForest(num_trees=10, bag_size=1, min_leaf_size=2).fit(X, y, p)
    with pytest.raises(BagConfigInvalid):
        cf.predict_with_std(X[:2])


def test_zero_price_variation():
    X, y, _, _ = _resid(n=40)
    with pytest.raises((ZeroLocalPriceVariation, NoResidualVariation)):
        CausalForest(num_trees=4, bag_size=2, min_leaf_size=2).fit(X, y, np.zeros(40))


def test_cate_filter():
    assert cate_from_cape(0.1, -1000.0, 100.0) == (-100.0, False)
    assert cate_from_cape(0.1, -100.0, 100.0, significance_filter=True) == (0.0, True)
    assert cate_from_cape(0.1, -1000.0, 100.0, significance_filter=True) == (-100.0, False)


def test_ape_and_clusters():
    rng = np.random.default_rng(0)
    p = rng.normal(size=500)
    y = -3 * p + rng.normal(size=500)
    est = estimate_ape(y, p, clusters=np.repeat(np.arange(50), 10), n_boot=100, seed=1)
    assert est.ape == pytest.approx(rr_slope(y, p))
    lo, hi = est.ci
    assert lo < -3 < hi
    years = np.repeat([2012, 2013], 250)
    units = np.arange(500)
    assert resolve_clusters(years, units) is not years
    np.testing.assert_array_equal(resolve_clusters(years, units), units)
    five = np.repeat(np.arange(5), 100)
    np.testing.assert_array_equal(resolve_clusters(five, units), five)


def test_cluster_bootstrap_is_deterministic():
    stat = np.mean
    x = np.arange(30.0)
    a = cluster_bootstrap(lambda i: stat(x[i]), 30, np.repeat(np.arange(6), 5), 50, seed=3)
    b = cluster_bootstrap(lambda i: stat(x[i]), 30, np.repeat(np.arange(6), 5), 50, seed=3)
    assert a.tobytes() == b.tobytes()
