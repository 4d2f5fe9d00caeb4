import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kernel_counter.kc import KernelModel, LabeledExample, standardize
from kernel_counter.synth import SyntheticModelParams, generate
from kernel_counter.tune import (
    TuneConfig,
    default_eta_grid,
    loo_cv,
    loo_predictions,
    loss_value,
    r_squared,
    rule_of_thumb_eta,
    rule_of_thumb_eta_per_datum,
    rule_of_thumb_for,
    tune_model,
)
from oracles import brute_predict


def smooth_curve_data(n=40, seed=0):
    rng = np.random.default_rng(seed)
    x = np.sort(rng.uniform(0, 10, n))
    return x[:, None], 50 + 30 * np.sin(x) + rng.normal(0, 2, n)


def test_default_grid():
    g = default_eta_grid()
    assert g.shape == (61,)
    np.testing.assert_allclose(sorted(1 / g), np.logspace(-3, 3, 61), rtol=1e-12)
    assert (np.diff(g) > 0).all()


def test_loo_predictions_match_brute_force():
    rng = np.random.default_rng(4)
    feats = rng.integers(0, 20, size=(9, 3)).astype(float)
    labels = rng.integers(0, 50, size=9).astype(float)
    eta = 0.7
    pred = loo_predictions(feats, labels, eta)
    for d in range(9):
        rest = [i for i in range(9) if i != d]
        # every fold pools the D - 1 training vectors with the held-out one
        expected = brute_predict(feats[rest].tolist(), labels[rest].tolist(), feats[d].tolist(), eta)
        assert pred[d] == pytest.approx(expected, rel=1e-12)


def test_single_value_grid():
    x, y = smooth_curve_data()
    assert loo_cv(x, y, TuneConfig(grid=[0.37])).eta == 0.37


def test_identical_examples_pick_largest_eta():
    res = loo_cv([[1.0, 2.0], [1.0, 2.0]], [5.0, 5.0])
    assert (res.losses == 0).all()
    assert res.eta == default_eta_grid()[-1]


def test_smooth_function_minimum_is_interior():
    x, y = smooth_curve_data()
    res = loo_cv(x, y)
    brute = np.array([np.mean((loo_predictions(x, y, e) - y) ** 2) for e in res.grid])
    np.testing.assert_allclose(res.losses, brute, rtol=1e-10)
    best = int(np.argmin(brute))
    assert 0 < best < len(brute) - 1
    assert res.eta == res.grid[best]


@pytest.mark.parametrize("loss", ["l1", "linf", "mse", "neg-r2"])
def test_every_loss_runs(loss):
    x, y = smooth_curve_data(seed=2)
    res = loo_cv(x, y, TuneConfig(loss=loss, rounding=True))
    assert np.isfinite(res.losses).all()
    assert res.eta in res.grid


def test_golden_search_matches_full_grid():
    for seed in range(6):
        params = SyntheticModelParams.from_T(5, gamma=5)
        data = generate(params, 300, seed)
        full = loo_cv(data.features, data.observed_counts)
        golden = loo_cv(data.features, data.observed_counts, TuneConfig(search="golden"))
        assert golden.eta == full.eta
        assert np.isnan(golden.losses).sum() > 30


def test_loo_needs_two_examples():
    with pytest.raises(ValueError):
        loo_cv([[1.0]], [1.0])


def test_bad_config():
    with pytest.raises(ValueError):
        TuneConfig(grid=[])
    with pytest.raises(ValueError):
        TuneConfig(grid=[1.0, -1.0])
    with pytest.raises(ValueError):
        TuneConfig(loss="huber")


def test_losses():
    assert loss_value("l1", [1, 2], [2, 4]) == 1.5
    assert loss_value("linf", [1, 2], [2, 4]) == 2
    assert loss_value("mse", [1, 2], [3, 2]) == 2.0
    assert loss_value("neg-r2", [1, 2, 3], [2, 4, 6]) == pytest.approx(0.0, abs=1e-15)


def test_r_squared_matches_least_squares_fit():
    rng = np.random.default_rng(1)
    truth = rng.normal(size=30)
    pred = 2 * truth + rng.normal(size=30)
    slope, intercept = np.polyfit(pred, truth, 1)
    resid = truth - (slope * pred + intercept)
    expected = 1 - resid @ resid / np.sum((truth - truth.mean()) ** 2)
    assert r_squared(pred, truth) == pytest.approx(expected, rel=1e-12)


def test_curve_csv(tmp_path):
    x, y = smooth_curve_data()
    res = loo_cv(x, y, TuneConfig(search="golden"))
    path = tmp_path / "curve.csv"
    res.write_curve(path)
    rows = list(csv.DictReader(open(path)))
    assert len(rows) == int(np.isfinite(res.losses).sum())
    inv = [float(r["inv_eta"]) for r in rows]
    assert inv == sorted(inv)


def test_tune_model_sets_eta():
    x, y = smooth_curve_data()
    model, res = tune_model(KernelModel(x, y))
    assert model.eta == res.eta == loo_cv(x, y).eta


def test_tune_model_ignores_duplicated_opinions_in_statistics():
    x, y = smooth_curve_data(n=20)
    exs = [LabeledExample(f, experts=(c, c)) for f, c in zip(x, np.round(y))]
    model = KernelModel.from_examples(exs)
    np.testing.assert_allclose(model.standardize_training()[::2], standardize(x)[0])


# -- rules of thumb -----------------------------------------------------------------

def test_rule_of_thumb_fallback():
    z = np.ones((4, 3))
    assert rule_of_thumb_eta(z, np.ones(3)) == default_eta_grid()[0]
    assert rule_of_thumb_eta(z, np.ones(3), fallback=0.5) == 0.5
    assert (rule_of_thumb_eta_per_datum(z, np.ones(3)) == default_eta_grid()[0]).all()


def test_rule_of_thumb_worked_values():
    assert rule_of_thumb_eta([[2.0]], [0.0]) == 8.0
    assert rule_of_thumb_eta_per_datum([[1.0, 1.0]], [0.0, 0.0]).tolist() == [2.0]


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.1, 10))
def test_rule_of_thumb_identities(seed, c):
    rng = np.random.default_rng(seed)
    train = rng.normal(size=(int(rng.integers(1, 15)), int(rng.integers(1, 6))))
    test = rng.normal(size=train.shape[1])
    eta = rule_of_thumb_eta(train, test)
    assert rule_of_thumb_eta_per_datum(train, test).mean() == pytest.approx(eta, rel=1e-12)
    scaled = rule_of_thumb_eta(c * train, c * test)
    assert scaled == pytest.approx(c * c * eta, rel=1e-12)


def test_rule_of_thumb_for_model():
    x, y = smooth_curve_data(n=10)
    model = KernelModel(x, y)
    z, _ = standardize(x, [3.0])
    assert rule_of_thumb_for(model, [3.0]) == pytest.approx(rule_of_thumb_eta(z[:-1], z[-1]))
    per = rule_of_thumb_for(model, [3.0], per_datum=True)
    assert per.shape == (10,)
    assert model.predict([3.0], per).value >= y.min()


@pytest.mark.slow
def test_optimal_eta_shrinks_with_more_data():
    medians = []
    for D in (100, 1000, 5000):
        etas = [loo_cv(d.features, d.observed_counts, TuneConfig(search="golden")).eta
                for d in (generate(SyntheticModelParams.from_T(3), D, s) for s in range(20))]
        medians.append(np.median(etas))
    assert medians[0] >= medians[1] >= medians[2]
    assert medians[0] > medians[2]
