"""Binary classifiers behind one train / predict_proba contract.

Families: Dummy (constant positive rate), LR (L2 logistic regression),
DT (CART, Gini), RF (bagged CART with per-split feature subsampling),
GBT (first-order gradient-boosted regression trees on logistic loss) and
KNN (Euclidean k nearest neighbours).
"""

from .base import (
    DEFAULT_GRIDS,
    FAMILIES,
    Family,
    InvalidHyperparameterError,
    ModelSpec,
    TrainedModel,
    expand_grid,
    load_model,
    predict_label,
    predict_proba,
    save_model,
    train,
)

__all__ = [
    "DEFAULT_GRIDS",
    "FAMILIES",
    "Family",
    "InvalidHyperparameterError",
    "ModelSpec",
    "TrainedModel",
    "expand_grid",
    "load_model",
    "predict_label",
    "predict_proba",
    "save_model",
    "train",
]
