from __future__ import annotations

import itertools
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.special import expit

from ..errors import DataError
from . import _cart
from .knn import knn_positive_fraction

FORMAT_NAME = "lmsfair-model"
FORMAT_VERSION = 1


class Family(str, Enum):
    DUMMY = "Dummy"
    LR = "LR"
    DT = "DT"
    RF = "RF"
    GBT = "GBT"
    KNN = "KNN"


FAMILIES = tuple(Family)


class InvalidHyperparameterError(ValueError):
    pass


def _depth(v):
    if v is None:
        return None
    if isinstance(v, str) and v.lower() in ("none", "unbounded"):
        return None
    v = int(v)
    if v < 1:
        raise InvalidHyperparameterError("max_depth must be >= 1 or unbounded")
    return v


def _pos_int(name):
    def check(v):
        if isinstance(v, bool) or int(v) != v or int(v) < 1:
            raise InvalidHyperparameterError(f"{name} must be a positive integer, got {v!r}")
        return int(v)
    return check


def _nonneg_float(name):
    def check(v):
        v = float(v)
        if not v >= 0 or math.isinf(v):
            raise InvalidHyperparameterError(f"{name} must be a finite non-negative number")
        return v
    return check


def _unit_rate(v):
    v = float(v)
    if not 0 < v <= 1:
        raise InvalidHyperparameterError("learning_rate must be in (0, 1]")
    return v


def _opt_pos_int(name):
    inner = _pos_int(name)
    return lambda v: None if v is None else inner(v)


# name -> (validator, default)
_PARAMS = {
    Family.DUMMY: {},
    Family.LR: {
        "l2": (_nonneg_float("l2"), 1.0),
        "max_iter": (_pos_int("max_iter"), 500),
        "tol": (_nonneg_float("tol"), 1e-6),
    },
    Family.DT: {
        "max_depth": (_depth, None),
        "min_leaf": (_pos_int("min_leaf"), 1),
    },
    Family.RF: {
        "n_trees": (_pos_int("n_trees"), 100),
        "max_depth": (_depth, None),
        "min_leaf": (_pos_int("min_leaf"), 1),
        "max_features": (_opt_pos_int("max_features"), None),
    },
    Family.GBT: {
        "n_stages": (_pos_int("n_stages"), 100),
        "learning_rate": (_unit_rate, 0.1),
        "max_depth": (_depth, 3),
        "min_leaf": (_pos_int("min_leaf"), 1),
    },
    Family.KNN: {
        "k": (_pos_int("k"), 5),
    },
}

DEFAULT_GRIDS = {
    Family.DUMMY: {},
    Family.LR: {"l2": [0.01, 0.1, 1.0, 10.0]},
    Family.DT: {"max_depth": [4, 8, 16, None], "min_leaf": [1, 10, 100]},
    Family.RF: {"n_trees": [100], "max_depth": [8, 16, None], "min_leaf": [1, 10]},
    Family.GBT: {"n_stages": [100, 200], "learning_rate": [0.1, 0.3], "max_depth": [3, 6]},
    Family.KNN: {"k": [5, 15, 51]},
}


def expand_grid(grid) -> list[dict]:
    """Grid points in order; a dict of lists expands as a product in key order."""
    if isinstance(grid, (list, tuple)):
        return [dict(p) for p in grid]
    if not grid:
        return [{}]
    keys = list(grid)
    values = [v if isinstance(v, (list, tuple)) else [v] for v in (grid[k] for k in keys)]
    return [dict(zip(keys, combo)) for combo in itertools.product(*values)]


def validate_hyperparameters(family: Family, params: dict) -> dict:
    family = Family(family)
    schema = _PARAMS[family]
    unknown = set(params) - set(schema)
    if unknown:
        raise InvalidHyperparameterError(f"unknown {family.value} hyperparameters: {sorted(unknown)}")
    out = {}
    for name, (check, default) in schema.items():
        out[name] = check(params[name]) if name in params else default
    return out


@dataclass(frozen=True)
class ModelSpec:
    family: Family
    hyperparameters: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))


class TrainedModel:
    """A fitted classifier; subclasses implement ``_raw_proba``."""

    family: Family

    def __init__(self, hyperparameters, seed, n_features, feature_names=None):
        self.hyperparameters = dict(hyperparameters)
        self.seed = int(seed)
        self.n_features = int(n_features)
        self.feature_names = None if feature_names is None else tuple(feature_names)

    def predict_proba(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(
                f"expected feature matrix with {self.n_features} columns, got shape {X.shape}"
            )
        return np.clip(self._raw_proba(np.ascontiguousarray(X)), 0.0, 1.0)

    def predict_label(self, X, threshold: float = 0.5) -> np.ndarray:
        return (self.predict_proba(X) >= threshold).astype(np.int64)

    def _raw_proba(self, X):
        raise NotImplementedError

    def _arrays(self) -> dict:
        return {}

    def _extra_meta(self) -> dict:
        return {}


class DummyModel(TrainedModel):
    family = Family.DUMMY

    def __init__(self, positive_rate, **kw):
        super().__init__(**kw)
        self.positive_rate = float(positive_rate)

    def _raw_proba(self, X):
        return np.full(X.shape[0], self.positive_rate)

    def _extra_meta(self):
        return {"positive_rate": self.positive_rate}


class LogisticModel(TrainedModel):
    family = Family.LR

    def __init__(self, weights, intercept, n_iter=0, **kw):
        super().__init__(**kw)
        self.weights = np.asarray(weights, dtype=np.float64)
        self.intercept = float(intercept)
        self.n_iter = int(n_iter)

    def _raw_proba(self, X):
        return expit(X @ self.weights + self.intercept)

    def _arrays(self):
        return {"weights": self.weights}

    def _extra_meta(self):
        return {"intercept": self.intercept, "n_iter": self.n_iter}


@dataclass(frozen=True)
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def predict(self, X):
        return _cart.apply_tree(X, self.feature, self.threshold, self.left, self.right, self.value)

    @property
    def n_leaves(self):
        return int(np.sum(self.feature == _cart.LEAF))

    @property
    def depth(self):
        depth = np.zeros(len(self.feature), dtype=np.int64)
        for node in range(len(self.feature)):
            if self.feature[node] != _cart.LEAF:
                depth[self.left[node]] = depth[node] + 1
                depth[self.right[node]] = depth[node] + 1
        return int(depth.max())


_TREE_FIELDS = ("feature", "threshold", "left", "right", "value")


def _grow(Xt, order, y, weight, max_depth, min_leaf, max_features, seed) -> Tree:
    md = -1 if max_depth is None else int(max_depth)
    arrays = _cart.build_tree(
        Xt, order, np.ascontiguousarray(y, dtype=np.float64),
        np.ascontiguousarray(weight, dtype=np.int64), md, int(min_leaf), int(max_features), np.uint64(seed),
    )
    return Tree(*arrays[:5])


class TreeModel(TrainedModel):
    family = Family.DT

    def __init__(self, tree: Tree, **kw):
        super().__init__(**kw)
        self.tree = tree

    def _raw_proba(self, X):
        return self.tree.predict(X)

    def _arrays(self):
        return {f"t0_{name}": getattr(self.tree, name) for name in _TREE_FIELDS}


class ForestModel(TrainedModel):
    family = Family.RF

    def __init__(self, trees, **kw):
        super().__init__(**kw)
        self.trees = list(trees)

    def tree_probas(self, X) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        return np.stack([t.predict(X) for t in self.trees])

    def _raw_proba(self, X):
        total = np.zeros(X.shape[0])
        for t in self.trees:
            total += t.predict(X)
        return total / len(self.trees)

    def _arrays(self):
        return {f"t{i}_{name}": getattr(t, name) for i, t in enumerate(self.trees) for name in _TREE_FIELDS}


class BoostedModel(TrainedModel):
    family = Family.GBT

    def __init__(self, init_score, learning_rate, trees, train_loss=(), **kw):
        super().__init__(**kw)
        self.init_score = float(init_score)
        self.learning_rate = float(learning_rate)
        self.trees = list(trees)
        self.train_loss = list(train_loss)

    def decision_function(self, X):
        X = np.ascontiguousarray(X, dtype=np.float64)
        F = np.full(X.shape[0], self.init_score)
        for t in self.trees:
            F += self.learning_rate * t.predict(X)
        return F

    def _raw_proba(self, X):
        return expit(self.decision_function(X))

    def _arrays(self):
        return {f"t{i}_{name}": getattr(t, name) for i, t in enumerate(self.trees) for name in _TREE_FIELDS}

    def _extra_meta(self):
        return {
            "init_score": self.init_score,
            "learning_rate": self.learning_rate,
            "train_loss": self.train_loss,
        }


class KNNModel(TrainedModel):
    family = Family.KNN

    def __init__(self, X_train, y_train, k, workers=1, **kw):
        super().__init__(**kw)
        self.X_train = np.ascontiguousarray(X_train, dtype=np.float64)
        self.y_train = np.ascontiguousarray(y_train, dtype=np.float64)
        self.k = int(k)
        self.workers = max(1, int(workers))

    def _raw_proba(self, X):
        if self.workers == 1 or X.shape[0] < 256:
            return knn_positive_fraction(self.X_train, self.y_train, X, self.k)
        chunks = np.array_split(np.arange(X.shape[0]), self.workers)
        with ThreadPoolExecutor(self.workers) as pool:
            parts = pool.map(
                lambda idx: knn_positive_fraction(self.X_train, self.y_train, np.ascontiguousarray(X[idx]), self.k),
                chunks,
            )
            return np.concatenate(list(parts))

    def _arrays(self):
        return {"X_train": self.X_train, "y_train": self.y_train}

    def _extra_meta(self):
        return {"k": self.k}


def _log_loss(y, F):
    return float(np.mean(np.logaddexp(0.0, F) - y * F))


def _fit_lr(X, y, l2, max_iter, tol):
    """Nesterov-accelerated full-batch gradient descent with step 1/L.

    Minimises mean log-loss + l2 / (2 n) * ||w||^2; the intercept is not
    penalised.
    """
    n, m = X.shape
    Xa = np.hstack([X, np.ones((n, 1))])
    gram = Xa.T @ Xa / n
    lipschitz = 0.25 * float(np.linalg.eigvalsh(gram)[-1]) + l2 / n
    step = 1.0 / lipschitz
    penalty = np.full(m + 1, l2 / n)
    penalty[-1] = 0.0

    def grad(theta):
        return Xa.T @ (expit(Xa @ theta) - y) / n + penalty * theta

    theta = np.zeros(m + 1)
    prev = theta.copy()
    n_iter = 0
    for it in range(1, max_iter + 1):
        g = grad(theta)
        if np.linalg.norm(g) < tol:
            break
        n_iter = it
        momentum = theta + ((it - 1) / (it + 2)) * (theta - prev)
        prev = theta
        theta = momentum - step * grad(momentum)
    return theta[:m], theta[m], n_iter


def train(spec: ModelSpec, X, y, feature_names=None, workers: int = 1) -> TrainedModel:
    """Fit ``spec`` on a scaled feature matrix and 0/1 labels."""
    X = np.ascontiguousarray(np.asarray(X, dtype=np.float64))
    y = np.asarray(y)
    if X.ndim != 2:
        raise ValueError("X must be a 2-D matrix")
    n, m = X.shape
    if n == 0:
        raise DataError("cannot train on an empty training set")
    if y.shape != (n,):
        raise ValueError("y must have one label per row")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    yf = y.astype(np.float64)
    family = spec.family
    params = validate_hyperparameters(family, spec.hyperparameters)
    common = {"hyperparameters": params, "seed": spec.seed, "n_features": m, "feature_names": feature_names}
    rate = float(yf.mean())
    single_label = rate in (0.0, 1.0)

    if family is Family.DUMMY:
        return DummyModel(rate, **common)

    if family is Family.LR:
        if single_label:
            # separable by fiat: weights stay 0, intercept saturates
            return LogisticModel(np.zeros(m), math.copysign(np.inf, rate - 0.5), **common)
        w, b, it = _fit_lr(X, yf, params["l2"], params["max_iter"], params["tol"])
        return LogisticModel(w, b, it, **common)

    if family is Family.KNN:
        return KNNModel(X, yf, params["k"], workers=workers, **common)

    Xt, order = _cart.presort(X)
    ones = np.ones(n, dtype=np.int64)

    if family is Family.DT:
        tree = _grow(Xt, order, yf, ones, params["max_depth"], params["min_leaf"], m, 0)
        return TreeModel(tree, **common)

    if family is Family.RF:
        max_features = params["max_features"] or math.ceil(math.sqrt(m))
        max_features = min(max_features, m)

        def one(t):
            rng = np.random.default_rng(np.random.SeedSequence([spec.seed & (2**64 - 1), t]))
            weight = np.bincount(rng.integers(0, n, size=n), minlength=n)
            tree_seed = int(rng.integers(0, 2**63))
            return _grow(Xt, order, yf, weight, params["max_depth"], params["min_leaf"], max_features, tree_seed)

        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                trees = list(pool.map(one, range(params["n_trees"])))
        else:
            trees = [one(t) for t in range(params["n_trees"])]
        return ForestModel(trees, **common)

    if family is Family.GBT:
        if single_label:
            return BoostedModel(math.copysign(np.inf, rate - 0.5), params["learning_rate"], [], **common)
        init = math.log(rate / (1 - rate))
        F = np.full(n, init)
        losses = [_log_loss(yf, F)]
        trees = []
        lr = params["learning_rate"]
        for _ in range(params["n_stages"]):
            residual = yf - expit(F)
            tree = _grow(Xt, order, residual, ones, params["max_depth"], params["min_leaf"], m, 0)
            F += lr * tree.predict(X)
            trees.append(tree)
            losses.append(_log_loss(yf, F))
        return BoostedModel(init, lr, trees, losses, **common)

    raise InvalidHyperparameterError(f"unknown family {family!r}")


def predict_proba(model: TrainedModel, X):
    """Probability of class 1; a single feature vector returns a float."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        return float(model.predict_proba(X[None, :])[0])
    return model.predict_proba(X)


def predict_label(model: TrainedModel, X, threshold: float = 0.5):
    p = predict_proba(model, X)
    if isinstance(p, float):
        return int(p >= threshold)
    return (p >= threshold).astype(np.int64)


_CLASSES = {
    Family.DUMMY: DummyModel,
    Family.LR: LogisticModel,
    Family.DT: TreeModel,
    Family.RF: ForestModel,
    Family.GBT: BoostedModel,
    Family.KNN: KNNModel,
}


def save_model(model: TrainedModel, path) -> None:
    """Write a self-describing .npz artifact (no pickling)."""
    meta = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "family": model.family.value,
        "hyperparameters": model.hyperparameters,
        "seed": model.seed,
        "n_features": model.n_features,
        "feature_names": None if model.feature_names is None else list(model.feature_names),
        **model._extra_meta(),
    }
    if hasattr(model, "trees"):
        meta["n_trees"] = len(model.trees)
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta)), **model._arrays())


def _trees_from(arrays, count):
    return [Tree(*(arrays[f"t{i}_{name}"] for name in _TREE_FIELDS)) for i in range(count)]


def load_model(path) -> TrainedModel:
    with np.load(path, allow_pickle=False) as data:
        arrays = {k: data[k] for k in data.files}
    meta = json.loads(str(arrays.pop("meta")))
    if meta.get("format") != FORMAT_NAME:
        raise ValueError("not a model artifact")
    if meta.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {meta.get('version')}")
    family = Family(meta["family"])
    common = {
        "hyperparameters": meta["hyperparameters"],
        "seed": meta["seed"],
        "n_features": meta["n_features"],
        "feature_names": meta["feature_names"],
    }
    if family is Family.DUMMY:
        return DummyModel(meta["positive_rate"], **common)
    if family is Family.LR:
        return LogisticModel(arrays["weights"], meta["intercept"], meta["n_iter"], **common)
    if family is Family.DT:
        return TreeModel(_trees_from(arrays, 1)[0], **common)
    if family is Family.RF:
        return ForestModel(_trees_from(arrays, meta["n_trees"]), **common)
    if family is Family.GBT:
        return BoostedModel(
            meta["init_score"], meta["learning_rate"], _trees_from(arrays, meta["n_trees"]),
            meta["train_loss"], **common,
        )
    return KNNModel(arrays["X_train"], arrays["y_train"], meta["k"], **common)
