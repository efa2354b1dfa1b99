from .cv import (
    CVResult,
    FeatureRemoval,
    FoldResult,
    backward_feature_selection,
    cross_validate,
    grid_search,
)
from .metrics import UndefinedMetricError, auc_roc, confusion_counts, weighted_f1
from .splits import FoldAssignment, stratified_group_kfold

__all__ = [
    "CVResult",
    "FeatureRemoval",
    "FoldAssignment",
    "FoldResult",
    "UndefinedMetricError",
    "auc_roc",
    "backward_feature_selection",
    "confusion_counts",
    "cross_validate",
    "grid_search",
    "stratified_group_kfold",
    "weighted_f1",
]
