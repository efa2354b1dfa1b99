import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lmsfair.errors import DataError
from lmsfair.evaluation import auc_roc
from lmsfair.models import (
    DEFAULT_GRIDS,
    Family,
    InvalidHyperparameterError,
    ModelSpec,
    expand_grid,
    load_model,
    predict_label,
    predict_proba,
    save_model,
    train,
)
from lmsfair.models import _cart

FAST = {
    Family.DUMMY: {},
    Family.LR: {"l2": 0.1},
    Family.DT: {"max_depth": 4, "min_leaf": 5},
    Family.RF: {"n_trees": 15, "max_depth": 6, "min_leaf": 3},
    Family.GBT: {"n_stages": 20, "learning_rate": 0.3, "max_depth": 3},
    Family.KNN: {"k": 7},
}


def toy(n=300, m=5, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, m))
    logit = 1.5 * X[:, 0] - X[:, 1] + 0.8 * X[:, 2] * X[:, 3]
    y = (rng.random(n) < 1 / (1 + np.exp(-logit))).astype(np.int64)
    return X, y


def fit(family, X, y, seed=3, workers=1, **override):
    params = dict(FAST[family], **override)
    return train(ModelSpec(family, params, seed), X, y, workers=workers)


def test_dummy_on_paper_balance():
    y = np.array([1] * 361 + [0] * 639)
    X = np.zeros((1000, 27))
    model = fit(Family.DUMMY, X, y)
    assert np.all(model.predict_proba(X) == pytest.approx(0.361))
    assert np.all(model.predict_label(X) == 0)


def test_lr_separable_toy_reaches_auc_one():
    X = np.array([[0.0, 0.0], [1.0, 0.2], [0.2, 1.0], [3.0, 3.0], [4.0, 2.5], [2.5, 4.0]])
    y = np.array([0, 0, 0, 1, 1, 1])
    model = fit(Family.LR, X, y, l2=0.01)
    assert auc_roc(model.predict_proba(X), y) == 1.0


def _best_gini_split(x, y):
    """Exhaustive weighted-Gini search over midpoints of sorted unique values."""
    vals = np.unique(x)
    best = (np.inf, None)
    for lo, hi in zip(vals, vals[1:]):
        thr = (lo + hi) / 2
        score = 0.0
        for side in (y[x <= thr], y[x > thr]):
            p = side.mean()
            score += len(side) * 2 * p * (1 - p)
        if score < best[0] - 1e-12:
            best = (score, thr)
    return best[1]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_stump_matches_bruteforce_gini(seed):
    rng = np.random.default_rng(seed)
    n = 60
    informative = rng.integers(0, 20, n).astype(float)
    y = (informative > rng.integers(3, 17)).astype(np.int64)
    flip = rng.random(n) < 0.1
    y[flip] = 1 - y[flip]
    if y.min() == y.max():
        return
    noise = rng.integers(0, 3, n).astype(float)
    X = np.column_stack([noise, informative])
    model = fit(Family.DT, X, y, max_depth=1, min_leaf=1)
    tree = model.tree
    # brute force across both features
    best = min(
        ((_split_score(X[:, f], y, _best_gini_split(X[:, f], y)), f, _best_gini_split(X[:, f], y))
         for f in range(2) if len(np.unique(X[:, f])) > 1),
    )
    assert tree.feature[0] == best[1]
    assert tree.threshold[0] == pytest.approx(best[2])


def _split_score(x, y, thr):
    s = 0.0
    for side in (y[x <= thr], y[x > thr]):
        p = side.mean()
        s += len(side) * 2 * p * (1 - p)
    return round(s, 9)


def test_clean_threshold_is_recovered():
    x = np.arange(10, dtype=float)
    y = (x >= 6).astype(np.int64)
    model = fit(Family.DT, x[:, None], y, max_depth=1, min_leaf=1)
    assert model.tree.threshold[0] == 5.5
    assert model.predict_proba(np.array([[5.5], [5.6]])).tolist() == [0.0, 1.0]


def test_forest_is_mean_of_trees():
    X, y = toy()
    model = fit(Family.RF, X, y)
    per_tree = model.tree_probas(X)
    assert per_tree.shape == (15, len(X))
    np.testing.assert_allclose(model.predict_proba(X), per_tree.mean(axis=0), rtol=0, atol=1e-15)


def test_forest_all_trees_positive():
    X = np.random.default_rng(0).normal(size=(30, 3))
    y = np.ones(30, dtype=np.int64)
    assert np.all(fit(Family.RF, X, y).predict_proba(X) == 1.0)


def test_knn_k1_returns_training_label():
    X, y = toy(80)
    model = fit(Family.KNN, X, y, k=1)
    assert model.predict_proba(X).tolist() == y.astype(float).tolist()


def test_knn_ties_prefer_lower_index():
    X = np.array([[1.0], [-1.0], [1.0]])
    y = np.array([1, 0, 0])
    # both training points at distance 1 tie; index 0 wins
    model = fit(Family.KNN, X[:2], y[:2], k=1)
    assert model.predict_proba(np.array([[0.0]])).tolist() == [1.0]


def test_gbt_training_loss_non_increasing():
    X, y = toy(400)
    model = fit(Family.GBT, X, y, n_stages=60)
    loss = np.asarray(model.train_loss)
    assert len(loss) == 61
    assert np.all(np.diff(loss) <= 1e-12)
    assert loss[-1] < loss[0]


@pytest.mark.parametrize("family", list(Family))
def test_outputs_are_probabilities_and_learn(family):
    X, y = toy()
    Xte, yte = toy(seed=9)
    model = fit(family, X, y)
    p = model.predict_proba(Xte)
    assert p.shape == (len(Xte),)
    assert np.all((0 <= p) & (p <= 1))
    if family is not Family.DUMMY:
        assert auc_roc(p, yte) > 0.7


@pytest.mark.parametrize("family", list(Family))
def test_seed_determinism_across_workers(family):
    X, y = toy()
    a = fit(family, X, y, workers=1).predict_proba(X)
    b = fit(family, X, y, workers=3).predict_proba(X)
    c = fit(family, X, y, workers=1).predict_proba(X)
    assert a.tobytes() == b.tobytes() == c.tobytes()


@pytest.mark.parametrize("family", [Family.DUMMY, Family.KNN, Family.LR, Family.DT])
def test_order_independent_families(family):
    X, y = toy()
    perm = np.random.default_rng(5).permutation(len(X))
    probe = toy(seed=11)[0]
    a = fit(family, X, y).predict_proba(probe)
    b = fit(family, X[perm], y[perm]).predict_proba(probe)
    if family is Family.LR:
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-9)
    else:
        np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("family", list(Family))
def test_single_label_training_gives_constant(family):
    X = np.random.default_rng(0).normal(size=(20, 3))
    for label in (0, 1):
        model = fit(family, X, np.full(20, label))
        assert np.all(model.predict_proba(X) == float(label))


@pytest.mark.parametrize("family", list(Family))
def test_save_load_round_trip(family, tmp_path):
    X, y = toy()
    model = fit(family, X, y)
    path = tmp_path / f"{family.value}.npz"
    save_model(model, path)
    back = load_model(path)
    assert back.family is family
    assert back.hyperparameters == model.hyperparameters
    assert back.predict_proba(X).tobytes() == model.predict_proba(X).tobytes()


def test_predict_label_boundary():
    X = np.zeros((4, 1))
    model = fit(Family.DUMMY, X, np.array([1, 1, 0, 0]))
    assert predict_proba(model, X[0]) == 0.5
    assert predict_label(model, X[0], 0.5) == 1
    model = fit(Family.DUMMY, np.zeros((100, 1)), np.array([1] * 49 + [0] * 51))
    assert predict_label(model, np.zeros(1)) == 0


def test_dimension_mismatch():
    X, y = toy()
    model = fit(Family.LR, X, y)
    with pytest.raises(ValueError, match="columns"):
        model.predict_proba(X[:, :3])


def test_training_errors():
    with pytest.raises(DataError):
        train(ModelSpec(Family.LR, {}), np.empty((0, 3)), np.empty(0))
    with pytest.raises(InvalidHyperparameterError):
        train(ModelSpec(Family.KNN, {"k": 0}), np.zeros((3, 1)), np.array([0, 1, 0]))
    with pytest.raises(InvalidHyperparameterError):
        train(ModelSpec(Family.LR, {"depth": 3}), np.zeros((3, 1)), np.array([0, 1, 0]))


def test_default_grids_expand():
    sizes = {f: len(expand_grid(g)) for f, g in DEFAULT_GRIDS.items()}
    assert sizes == {
        Family.DUMMY: 1, Family.LR: 4, Family.DT: 12, Family.RF: 6, Family.GBT: 8, Family.KNN: 3,
    }


def test_presort_orders_are_stable():
    X = np.array([[2.0, 1.0], [1.0, 1.0], [2.0, 0.0]])
    Xt, order = _cart.presort(X)
    assert order[0].tolist() == [1, 0, 2]
    assert order[1].tolist() == [2, 0, 1]
    assert Xt.shape == (2, 3)
