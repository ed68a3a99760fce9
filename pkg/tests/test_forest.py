import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rfadjust.forest import (
    ForestConfig,
    fit_forest,
    insample_predict,
    oob_predict,
    predict,
    variable_importance,
)


def _data(n=60, p=5, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p))
    y = X[:, 0] ** 2 + np.sin(2 * X[:, 1]) + 0.3 * rng.standard_normal(n)
    return X, y


def _best_split_oracle(x, y, min_leaf=1):
    """Exhaustive search over midpoints between consecutive distinct values."""
    xs = np.unique(x)
    best = None
    for lo, hi in zip(xs[:-1], xs[1:]):
        thr = (lo + hi) / 2
        left, right = y[x <= thr], y[x > thr]
        if len(left) < min_leaf or len(right) < min_leaf:
            continue
        sse = ((left - left.mean()) ** 2).sum() + ((right - right.mean()) ** 2).sum()
        if best is None or sse < best[0] - 1e-12:
            best = (sse, thr, left.mean(), right.mean())
    return best


class TestSplitting:
    def test_single_split_matches_exhaustive_search(self):
        x = np.array([0.3, 1.7, 2.2, 0.9, 3.1, 2.6])
        y = np.array([1.0, 2.0, 6.0, 1.5, 7.0, 5.5])
        cfg = ForestConfig(n_trees=1, mtry=1, min_leaf=1, max_depth=1, bootstrap=False)
        tree = fit_forest(x.reshape(-1, 1), y, cfg).tree(0)
        _, thr, lmean, rmean = _best_split_oracle(x, y)
        assert tree.feature[0] == 0
        assert tree.threshold[0] == pytest.approx(thr)
        assert tree.value[tree.left[0]] == pytest.approx(lmean)
        assert tree.value[tree.right[0]] == pytest.approx(rmean)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.integers(-20, 20), min_size=6, max_size=6, unique=True),
           st.lists(st.floats(-50, 50, allow_nan=False), min_size=6, max_size=6))
    def test_root_split_matches_oracle(self, xs, ys):
        x = np.array(xs, dtype=float)
        y = np.array(ys)
        cfg = ForestConfig(n_trees=1, mtry=1, min_leaf=1, max_depth=1, bootstrap=False)
        tree = fit_forest(x.reshape(-1, 1), y, cfg).tree(0)
        oracle = _best_split_oracle(x, y)
        total_sse = ((y - y.mean()) ** 2).sum()
        if oracle is None or oracle[0] >= total_sse - 1e-9 * max(1.0, total_sse):
            return  # no useful split; the tree may stay a leaf
        assert tree.feature[0] == 0
        sse_at = lambda t: sum(((y[m] - y[m].mean()) ** 2).sum()
                               for m in (x <= t, x > t))
        assert sse_at(tree.threshold[0]) == pytest.approx(oracle[0], rel=1e-9, abs=1e-9)

    def test_equal_gain_prefers_lower_threshold(self):
        # symmetric data: splits at 1.5 and 3.5 have identical gain
        x = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
        y = np.array([0.0, 1.0, 1.0, 1.0, 0.0])
        cfg = ForestConfig(n_trees=1, mtry=1, min_leaf=1, max_depth=1, bootstrap=False)
        tree = fit_forest(x.reshape(-1, 1), y, cfg).tree(0)
        assert tree.threshold[0] == 1.5

    def test_equal_gain_prefers_lower_feature(self):
        x = np.array([1.0, 2.0, 3.0, 4.0])
        X = np.column_stack([x, x * 10])
        y = np.array([0.0, 0.0, 1.0, 1.0])
        cfg = ForestConfig(n_trees=1, mtry=2, min_leaf=1, max_depth=1, bootstrap=False)
        assert fit_forest(X, y, cfg).tree(0).feature[0] == 0

    def test_leaves_respect_min_leaf_and_hold_inbag_means(self):
        X, y = _data(80, 4, seed=3)
        model = fit_forest(X, y, ForestConfig(n_trees=20, min_leaf=4, seed=9))
        for t in range(model.n_trees):
            tree = model.tree(t)
            leaves = np.flatnonzero(tree.feature == -1)
            assert np.all(tree.count[leaves] >= 4) or len(leaves) == 1
            routed = np.array([tree.apply(row) for row in X])
            w = model.inbag[t]
            for leaf in leaves:
                mask = routed == leaf
                assert w[mask].sum() == tree.count[leaf]
                assert tree.value[leaf] == pytest.approx(
                    np.sum(w[mask] * y[mask]) / w[mask].sum(), rel=1e-12)
            internal = np.flatnonzero(tree.feature >= 0)
            assert np.all(tree.left[internal] > 0) and np.all(tree.right[internal] > 0)

    def test_depth_limit(self):
        X, y = _data(100, 3)
        model = fit_forest(X, y, ForestConfig(n_trees=5, max_depth=2, min_leaf=1))
        assert np.all(model.node_count <= 7)

    def test_constant_features_give_leaves(self):
        X = np.ones((10, 2))
        y = np.arange(10.0)
        model = fit_forest(X, y, ForestConfig(n_trees=3))
        assert model.n_splits == 0


class TestPrediction:
    def test_constant_response(self):
        X, _ = _data(40, 3)
        y = np.full(40, 2.5)
        model = fit_forest(X, y, ForestConfig(n_trees=50))
        np.testing.assert_array_equal(oob_predict(model, X), y)
        np.testing.assert_array_equal(y - oob_predict(model, X), 0.0)
        assert predict(model, X[0]) == 2.5

    def test_oob_fraction_near_inverse_e(self):
        X, y = _data(100, 3)
        model = fit_forest(X, y, ForestConfig(n_trees=500, seed=1))
        frac = (model.inbag == 0).mean(axis=0)
        assert np.all(np.abs(frac - (1 - 1 / 100) ** 100) <= 0.09)
        assert abs(frac.mean() - np.exp(-1)) <= 0.03

    def test_single_tree_fallback_to_mean(self):
        X, y = _data(200, 3, seed=5)
        model = fit_forest(X, y, ForestConfig(n_trees=1, seed=2))
        oob = model.inbag[0] == 0
        assert abs(oob.mean() - np.exp(-1)) < 0.08
        pred = oob_predict(model, X)
        np.testing.assert_array_equal(model.never_oob, ~oob)
        np.testing.assert_array_equal(pred[~oob], y.mean())
        tree = model.tree(0)
        expected = np.array([tree.value[tree.apply(X[i])] for i in np.flatnonzero(oob)])
        np.testing.assert_array_equal(pred[oob], expected)

    def test_oob_mean_over_excluding_trees(self):
        X, y = _data(30, 2, seed=8)
        model = fit_forest(X, y, ForestConfig(n_trees=25, seed=4))
        pred = oob_predict(model, X)
        for i in range(30):
            trees = [t for t in range(25) if model.inbag[t, i] == 0]
            if not trees:
                continue
            vals = [model.tree(t).value[model.tree(t).apply(X[i])] for t in trees]
            assert pred[i] == pytest.approx(np.mean(vals), rel=1e-12)

    def test_predictions_within_response_range(self):
        X, y = _data(50, 4, seed=2)
        model = fit_forest(X, y, ForestConfig(n_trees=100))
        grid = np.random.default_rng(0).standard_normal((300, 4)) * 3
        out = predict(model, grid)
        assert out.min() >= y.min() - 1e-12 and out.max() <= y.max() + 1e-12
        oob = oob_predict(model, X)
        assert oob.min() >= y.min() - 1e-12 and oob.max() <= y.max() + 1e-12

    def test_route_by_hand(self):
        X = np.array([[1.0], [2.0], [3.0], [4.0]])
        y = np.array([0.0, 0.0, 10.0, 10.0])
        cfg = ForestConfig(n_trees=1, mtry=1, min_leaf=1, bootstrap=False)
        model = fit_forest(X, y, cfg)
        # one split at 2.5 separates two pure leaves
        assert model.tree(0).threshold[0] == 2.5
        assert predict(model, [1.0]) == 0.0
        assert predict(model, [3.7]) == 10.0

    def test_identical_stumps(self):
        X, y = _data(30, 2)
        stump = ForestConfig(n_trees=1, mtry=2, max_depth=1, bootstrap=False, min_leaf=1)
        many = stump.replace(n_trees=7)
        one = fit_forest(X, y, stump)
        seven = fit_forest(X, y, many)
        x = np.array([0.2, -0.4])
        assert predict(seven, x) == pytest.approx(predict(one, x), rel=1e-12)

    def test_insample_uses_all_trees(self):
        X, y = _data(30, 2)
        model = fit_forest(X, y, ForestConfig(n_trees=10))
        np.testing.assert_allclose(insample_predict(model), predict(model, X), rtol=1e-12)

    def test_shape_errors(self):
        X, y = _data(30, 2)
        model = fit_forest(X, y, ForestConfig(n_trees=3))
        with pytest.raises(ValueError):
            oob_predict(model, X[:10])
        with pytest.raises(ValueError):
            predict(model, [1.0, 2.0, 3.0])
        with pytest.raises(ValueError):
            fit_forest(X[:1], y[:1])
        with pytest.raises(ValueError):
            fit_forest(X, y[:5])


class TestDeterminismAndInvariance:
    def test_same_seed_same_model(self):
        X, y = _data()
        a = fit_forest(X, y, ForestConfig(n_trees=50, seed=123))
        b = fit_forest(X, y, ForestConfig(n_trees=50, seed=123))
        assert a.equals(b)
        assert a.dumps() == b.dumps()
        np.testing.assert_array_equal(oob_predict(a, X), oob_predict(b, X))

    def test_different_seed_different_model(self):
        X, y = _data()
        a = fit_forest(X, y, ForestConfig(n_trees=10, seed=1))
        b = fit_forest(X, y, ForestConfig(n_trees=10, seed=2))
        assert not a.equals(b)

    def test_trees_excluding_a_row_ignore_its_response(self):
        X, y = _data(50, 3, seed=4)
        cfg = ForestConfig(n_trees=60, seed=77)
        a = fit_forest(X, y, cfg)
        i = 13
        y2 = y.copy()
        y2[i] += 100.0
        b = fit_forest(X, y2, cfg)
        np.testing.assert_array_equal(a.inbag, b.inbag)
        out = np.flatnonzero(a.inbag[:, i] == 0)
        assert out.size > 0
        for t in out:
            ta, tb = a.tree(t), b.tree(t)
            np.testing.assert_array_equal(ta.feature, tb.feature)
            np.testing.assert_array_equal(ta.threshold, tb.threshold)
            np.testing.assert_array_equal(ta.value, tb.value)
        assert oob_predict(a, X)[i] == oob_predict(b, X)[i]

    @pytest.mark.parametrize("transform", [np.exp, lambda v: v ** 3, lambda v: 5 * v - 2])
    def test_monotone_feature_transform(self, transform):
        X, y = _data(70, 3, seed=6)
        cfg = ForestConfig(n_trees=40, seed=5)
        a = fit_forest(X, y, cfg)
        X2 = X.copy()
        X2[:, 1] = transform(X2[:, 1])
        b = fit_forest(X2, y, cfg)
        for t in range(cfg.n_trees):
            np.testing.assert_array_equal(a.tree(t).feature, b.tree(t).feature)
            np.testing.assert_array_equal(a.tree(t).value, b.tree(t).value)
            # the in-bag partition is order-only; a midpoint threshold may route
            # an out-of-bag value lying between two in-bag values differently
            inbag = np.flatnonzero(a.inbag[t] > 0)
            assert ([a.tree(t).apply(X[i]) for i in inbag]
                    == [b.tree(t).apply(X2[i]) for i in inbag])

    def test_affine_transform_keeps_oob_predictions(self):
        X, y = _data(70, 3, seed=6)
        cfg = ForestConfig(n_trees=40, seed=5)
        X2 = X.copy()
        X2[:, 1] = 4.0 * X2[:, 1] + 1.0
        np.testing.assert_array_equal(oob_predict(fit_forest(X, y, cfg), X),
                                      oob_predict(fit_forest(X2, y, cfg), X2))


class TestImportance:
    def test_signal_feature_ranked_first(self):
        votes = 0
        for rep in range(20):
            rng = np.random.default_rng(1000 + rep)
            X = rng.standard_normal((100, 5))
            y = X[:, 0].copy()
            model = fit_forest(X, y, ForestConfig(n_trees=100, seed=rep))
            votes += int(np.argmax(variable_importance(model)) == 0)
        assert votes > 10

    def test_no_splits_gives_zeros(self):
        X, y = _data(20, 3)
        model = fit_forest(X, y, ForestConfig(n_trees=10, min_leaf=20))
        np.testing.assert_array_equal(variable_importance(model), np.zeros(3))

    def test_sums_to_one(self):
        X, y = _data()
        imp = variable_importance(fit_forest(X, y, ForestConfig(n_trees=30)))
        assert imp.sum() == pytest.approx(1.0)
        assert np.all(imp >= 0)


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(n_trees=0), dict(mtry=0), dict(min_leaf=0),
                                    dict(max_depth=0), dict(seed=-1)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ForestConfig(**kw)

    def test_mtry_default_and_bound(self):
        assert ForestConfig().resolve_mtry(40) == 13
        assert ForestConfig().resolve_mtry(2) == 1
        with pytest.raises(ValueError):
            ForestConfig(mtry=5).resolve_mtry(3)
