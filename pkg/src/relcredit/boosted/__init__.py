from .folds import FoldPlan, stratified_folds
from .gbdt import EXACT, HISTOGRAM, GbdtModel, GbdtParams, Tree, fit_gbdt, grow_tree, predict_gbdt
from .hybrid import HybridModel, embedding_columns, fit_hybrid, hybrid_matrix
from .isotonic import IsotonicMap, calibrate_isotonic, pav
from .linear import ConvergenceWarning, LinearModel, LogisticConfig, fit_logistic

__all__ = [
    "FoldPlan", "stratified_folds", "EXACT", "HISTOGRAM", "GbdtModel", "GbdtParams", "Tree", "fit_gbdt",
    "grow_tree", "predict_gbdt", "HybridModel", "embedding_columns", "fit_hybrid", "hybrid_matrix",
    "IsotonicMap", "calibrate_isotonic", "pav", "ConvergenceWarning", "LinearModel", "LogisticConfig",
    "fit_logistic",
]
