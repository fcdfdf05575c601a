import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lastmile.boosting import (GBTEnsemble, LssEnsemble, gbt_fit, lss_fit, lss_grad_hess, lss_nll, predict_distribution,
                               tree_fit, write_predictions_csv)
from lastmile.errors import ConfigError, DomainError, ShapeError
from lastmile.ingest import super_tag_rollup
from lastmile.synth import synth_city


def oracle_tree(X, g, h, depth, mcw, lam):
    """Exhaustive recursive split search; returns a predict function."""
    G, H = g.sum(), h.sum()
    leaf = -G / (H + lam)
    if depth == 0:
        return lambda x: leaf
    best = None
    for f in range(X.shape[1]):
        vals = sorted(set(X[:, f]))
        for lo, hi in zip(vals[:-1], vals[1:]):
            thr = lo + (hi - lo) / 2
            m = X[:, f] <= thr
            gl, hl = g[m].sum(), h[m].sum()
            gr, hr = G - gl, H - hl
            if hl < mcw or hr < mcw:
                continue
            gain = 0.5 * (gl ** 2 / (hl + lam) + gr ** 2 / (hr + lam) - G ** 2 / (H + lam))
            if gain > 0 and (best is None or gain > best[0] + 1e-12):
                best = (gain, f, thr)
    if best is None:
        return lambda x: leaf
    _, f, thr = best
    m = X[:, f] <= thr
    left = oracle_tree(X[m], g[m], h[m], depth - 1, mcw, lam)
    right = oracle_tree(X[~m], g[~m], h[~m], depth - 1, mcw, lam)
    return lambda x: left(x) if x[f] <= thr else right(x)


def test_tree_matches_exhaustive_oracle():
    rng = np.random.default_rng(0)
    for trial in range(40):
        n = int(rng.integers(10, 65))
        X = rng.integers(0, 6, (n, 3)).astype(float)
        g = rng.standard_normal(n)
        h = rng.uniform(0.5, 2.0, n)
        depth, mcw = int(rng.integers(1, 4)), float(rng.uniform(0, 4))
        tree = tree_fit(X, g, h, depth, mcw, 1.0)
        oracle = oracle_tree(X, g, h, depth, mcw, 1.0)
        probe = rng.integers(-1, 7, (50, 3)).astype(float)
        assert np.allclose(tree.predict(probe), [oracle(x) for x in probe], atol=1e-12), trial


def test_step_function_splits_at_midpoint():
    x = np.array([-3.0, -1.0, 0.0, 0.5, 2.0, 4.0])
    y = (x > 0).astype(float)
    tree = tree_fit(x[:, None], -y, np.ones(6), max_depth=1, min_child_weight=1.0, lambda_reg=0.0)
    assert tree.feature[0] == 0 and tree.threshold[0] == 0.25


def test_lowest_feature_wins_ties():
    x = np.array([0.0, 0.0, 1.0, 1.0])
    X = np.column_stack([x, x])
    tree = tree_fit(X, np.array([1.0, 1.0, -1.0, -1.0]), np.ones(4), 1, 1.0, 1.0)
    assert tree.feature[0] == 0


def test_row_order_does_not_change_tree():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((80, 4))
    g = rng.standard_normal(80)
    perm = rng.permutation(80)
    a = tree_fit(X, g, np.ones(80), 3, 2.0, 1.0)
    b = tree_fit(X[perm], g[perm], np.ones(80), 3, 2.0, 1.0)
    assert a.to_dict() == b.to_dict()


def test_no_positive_gain_gives_stump():
    X = np.arange(20.0)[:, None]
    tree = tree_fit(X, np.zeros(20), np.ones(20), 4, 1.0, 1.0)
    assert tree.n_nodes == 1 and tree.value[0] == 0.0
    with pytest.raises(DomainError):
        tree_fit(X, np.zeros(20), -np.ones(20))


def test_gbt_constant_target_and_zero_trees():
    X = np.random.default_rng(0).standard_normal((30, 2))
    ens = gbt_fit(X, np.full(30, 7.0), n_trees=5)
    assert np.allclose(ens.predict(X), 7.0)
    assert all(t.n_nodes == 1 and t.value[0] == 0.0 for t in ens.trees)
    y = np.arange(30.0)
    assert np.allclose(gbt_fit(X, y, n_trees=0).predict(X), y.mean())


def test_gbt_exact_split_target_fits_quickly():
    X = np.column_stack([np.repeat([0.0, 1.0], 20), np.random.default_rng(2).standard_normal(40)])
    y = np.where(X[:, 0] > 0, 300.0, 100.0)
    ens = gbt_fit(X, y, n_trees=5, learning_rate=1.0, max_depth=1, lambda_reg=0.0)
    assert ens.history[-1] < 1e-20


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_gbt_training_mse_never_increases(seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((60, 3))
    y = np.sin(X[:, 0]) * 50 + rng.standard_normal(60) * 5
    h = gbt_fit(X, y, n_trees=15, learning_rate=0.3, max_depth=3, min_child_weight=2).history
    assert all(b <= a + 1e-9 for a, b in zip(h, h[1:]))


def test_gbt_prediction_is_base_plus_scaled_leaf_sum():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((100, 3))
    y = X @ [3.0, -1.0, 0.5] + rng.standard_normal(100)
    ens = gbt_fit(X, y, n_trees=20)
    probe = rng.standard_normal((25, 3))
    manual = []
    for x in probe:
        total = 0.0
        for t in ens.trees:
            node = 0
            while t.feature[node] >= 0:
                node = t.left[node] if x[t.feature[node]] <= t.threshold[node] else t.right[node]
            total += t.value[node]
        manual.append(ens.base_score + ens.learning_rate * total)
    assert np.allclose(ens.predict(probe), manual, atol=1e-12)


def test_feature_scaling_invariance():
    rng = np.random.default_rng(4)
    X = rng.standard_normal((120, 3))
    y = X[:, 0] ** 2 + X[:, 1]
    Xs = X.copy()
    Xs[:, 1] *= 2
    probe = rng.standard_normal((40, 3))
    ps = probe.copy()
    ps[:, 1] *= 2
    assert np.allclose(gbt_fit(X, y, n_trees=20).predict(probe), gbt_fit(Xs, y, n_trees=20).predict(ps), atol=1e-12)


def test_gbt_checkpoint_round_trip():
    rng = np.random.default_rng(5)
    X = rng.standard_normal((50, 2))
    ens = gbt_fit(X, X[:, 0] * 10, n_trees=10)
    back = GBTEnsemble.from_dict(json.loads(json.dumps(ens.to_dict())))
    assert np.array_equal(back.predict(X), ens.predict(X))


def test_gbt_validation_errors():
    X = np.zeros((5, 2))
    with pytest.raises(ConfigError):
        gbt_fit(X, np.zeros(5))
    with pytest.raises(ShapeError):
        gbt_fit(np.zeros((20, 2)), np.zeros(19))
    with pytest.raises(ConfigError):
        gbt_fit(np.zeros((20, 2)), np.zeros(20), early_stopping_rounds=3)


def test_gbt_early_stopping_keeps_best_round():
    rng = np.random.default_rng(6)
    X = rng.standard_normal((300, 2))
    y = X[:, 0] + rng.standard_normal(300) * 3
    ens = gbt_fit(X[:200], y[:200], n_trees=300, learning_rate=0.3, max_depth=4, min_child_weight=1,
                  eval_set=(X[200:], y[200:]), early_stopping_rounds=10)
    best = int(np.argmin(ens.val_history))
    assert len(ens.trees) == best < 300
    assert len(ens.val_history) == best + 11
    assert np.mean((ens.predict(X[200:]) - y[200:]) ** 2) == pytest.approx(ens.val_history[best])


# -- lognormal boosting -------------------------------------------------------

def test_lss_gradients_match_finite_differences():
    rng = np.random.default_rng(7)
    y = np.exp(rng.uniform(2, 7, 1000))
    mu = rng.uniform(2, 7, 1000)
    s = rng.uniform(-1.5, 0.7, 1000)
    e = 1e-5
    fd_mu = (lss_nll(y, mu + e, s) - lss_nll(y, mu - e, s)) / (2 * e)
    fd_s = (lss_nll(y, mu, s + e) - lss_nll(y, mu, s - e)) / (2 * e)
    fd_mumu = (lss_nll(y, mu + e, s) - 2 * lss_nll(y, mu, s) + lss_nll(y, mu - e, s)) / e ** 2
    g_mu, h_mu, g_s, h_s = lss_grad_hess(y, mu, s)
    for got, fd in ((g_mu, fd_mu), (g_s, fd_s)):
        assert np.max(np.abs(got - fd) / np.maximum(1.0, np.abs(fd))) < 1e-6
    assert np.max(np.abs(h_mu - fd_mumu) / np.maximum(1.0, np.abs(fd_mumu))) < 1e-3
    fd_ss = (lss_nll(y, mu, s + e) - 2 * lss_nll(y, mu, s) + lss_nll(y, mu, s - e)) / e ** 2
    exact = 2 * (np.log(y) - mu) ** 2 * np.exp(-2 * s)
    assert np.max(np.abs(exact - fd_ss) / np.maximum(1.0, fd_ss)) < 1e-3
    assert np.all(h_s >= 1e-6) and np.allclose(h_s, np.maximum(exact, 1e-6))


def test_lss_stationary_at_log_y():
    g_mu, _, g_s, _ = lss_grad_hess(np.array([150.0]), np.log([150.0]), np.array([0.0]))
    assert g_mu[0] == 0.0 and g_s[0] == 1.0


def test_lss_rejects_non_positive_y():
    X = np.zeros((20, 1))
    with pytest.raises(DomainError):
        lss_fit(X, np.r_[np.ones(19), 0.0])


def test_lss_nll_decreases_over_windows():
    rng = np.random.default_rng(8)
    X = rng.standard_normal((400, 3))
    y = np.exp(4 + X[:, 0] + np.exp(0.3 * X[:, 1] - 1) * rng.standard_normal(400))
    h = lss_fit(X, y, n_trees=60).history
    assert all(h[t + 5] <= h[t] + 1e-9 for t in range(len(h) - 5))
    assert h[-1] < h[0] - 0.5


def test_lss_homoscedastic_sigma_is_flat():
    m, d, _ = synth_city(11, 200, 4000, 0.0)
    rollup = super_tag_rollup(m)
    X = rollup[[m.row(r.cell) for r in d]]
    y = np.array([r.service_time_s for r in d])
    n = len(y)
    ens = lss_fit(X[: int(0.8 * n)], y[: int(0.8 * n)], eval_set=(X[int(0.8 * n):], y[int(0.8 * n):]),
                  early_stopping_rounds=20)
    _, sigma = ens.predict_params(X)
    assert sigma.std() < 0.05 * sigma.mean()


def test_lss_mu_recovers_planted_context():
    m, d, truth = synth_city(12, 200, 6000, 2.0)
    rollup = super_tag_rollup(m)
    X = rollup[[m.row(r.cell) for r in d]]
    y = np.array([r.service_time_s for r in d])
    ens = lss_fit(X, y, n_trees=100)
    mu, _ = ens.predict_params(rollup[[m.row(c) for c in truth.cells]])
    assert np.corrcoef(mu, truth.mu_true)[0, 1] >= 0.8


def test_predict_distribution_contract():
    rng = np.random.default_rng(9)
    X = rng.standard_normal((100, 2))
    ens = lss_fit(X, np.exp(3 + X[:, 0] + 0.2 * rng.standard_normal(100)), n_trees=20)
    d = predict_distribution(ens, X[0])
    mu, sigma = ens.predict_params(X[:1])
    assert d.quantile(0.5) == pytest.approx(np.exp(mu[0])) and d.sigma == pytest.approx(sigma[0])
    same = predict_distribution(ens, np.zeros((3, 2)))
    assert same[0] == same[1] == same[2]
    with pytest.raises(ShapeError):
        predict_distribution(ens, np.zeros(3))
    back = LssEnsemble.from_dict(json.loads(json.dumps(ens.to_dict())))
    assert np.array_equal(back.predict_params(X)[1], ens.predict_params(X)[1])


def test_predictions_csv(tmp_path):
    rng = np.random.default_rng(10)
    X = rng.standard_normal((30, 2))
    ens = lss_fit(X, np.exp(3 + X[:, 0]), n_trees=5)
    write_predictions_csv(ens, X[:3], tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    mu, sigma = ens.predict_params(X[:3])
    assert lines[0] == "row_id,mu,sigma" and len(lines) == 4
    assert [float(v) for v in lines[2].split(",")] == [1.0, mu[1], sigma[1]]
