"""Gradient-boosted trees under a Mahalanobis loss with an estimated spatial covariance."""

from .boosting import Ensemble, FitConfig, fit, load, n_trees_effective, predict, save
from .covariance import CovarianceParams, Family, fgls, fit_variogram, empirical_semivariogram
from .data import SpatialDataset, SplitIndices, load_csv, split, write_csv
from .evaluate import (
    baseline_gls_regression,
    baseline_identity_boosting,
    compare,
    metrics,
    wilcoxon_one_sided,
)
from .simulate import SimSpec, simulate
from .tree import GrowConfig, Tree, grow_tree, solve_leaf_weights
from .tune import space_filling_design, tune

__version__ = "0.1.0"

__all__ = [
    "CovarianceParams", "Ensemble", "Family", "FitConfig", "GrowConfig", "SimSpec",
    "SpatialDataset", "SplitIndices", "Tree", "baseline_gls_regression",
    "baseline_identity_boosting", "compare", "empirical_semivariogram", "fgls", "fit",
    "fit_variogram", "grow_tree", "load", "load_csv", "metrics", "n_trees_effective",
    "predict", "save", "simulate", "solve_leaf_weights", "space_filling_design", "split",
    "tune", "wilcoxon_one_sided", "write_csv",
]
