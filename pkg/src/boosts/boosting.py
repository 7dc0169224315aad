"""Boosting loop: alternate tree growth under the current covariance estimate
with FGLS re-estimation of that covariance from the updated residuals."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .covariance import (
    Basis,
    CovarianceParams,
    Family,
    LwmlrConfig,
    covariance_factor,
    default_lwmlr_config,
    fgls_estimate,
)
from .data import SpatialDataset, SplitIndices
from .errors import BoostSError, ModelFormatError, UnsupportedVersionError, ValidationError
from .loss import DENSE_CAP, compute_loss_state
from .tree import GrowConfig, Tree, grow_tree

log = logging.getLogger(__name__)

MODEL_VERSION = 1


@dataclass(frozen=True)
class FitConfig:
    """Everything the boosting loop consumes.

    ``fixed_covariance`` bypasses FGLS entirely (``CovarianceParams.identity()``
    gives classical second-order boosting). ``learning_rate`` scales every
    tree's weights after it is grown; 1.0 leaves them as solved.
    ``early_stop_patience = 0`` grows all ``n_trees`` trees.
    """

    n_trees: int = 50
    grow: GrowConfig = field(default_factory=lambda: GrowConfig(lam=0.05, gamma=4.25))
    family: Family = Family.GAUSSIAN
    n_kernels: int = 4
    lwmlr_basis: Basis = Basis.CONSTANT
    lwmlr: Optional[LwmlrConfig] = None
    detrend: bool = True
    cov_update_every: int = 1
    fgls_max_iter: int = 10
    fgls_tol: float = 1e-4
    n_bins: int = 15
    early_stop_patience: int = 3
    learning_rate: float = 1.0
    fixed_covariance: Optional[CovarianceParams] = None
    dense_cap: int = DENSE_CAP
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        object.__setattr__(self, "lwmlr_basis", Basis(self.lwmlr_basis))
        if self.n_trees < 1:
            raise ValidationError("n_trees must be >= 1")
        if self.cov_update_every < 1:
            raise ValidationError("cov_update_every must be >= 1")
        if self.early_stop_patience < 0 or self.n_kernels < 1 or self.n_bins < 1:
            raise ValidationError("early_stop_patience, n_kernels and n_bins out of range")
        if self.fgls_max_iter < 1 or not self.fgls_tol > 0:
            raise ValidationError("fgls_max_iter must be >= 1 and fgls_tol > 0")
        if not 0 < self.learning_rate <= 1:
            raise ValidationError("learning_rate must lie in (0, 1]")
        if self.seed < 0 or self.workers < 1:
            raise ValidationError("seed must be >= 0 and workers >= 1")

    @property
    def lam(self):
        return self.grow.lam

    @property
    def gamma(self):
        return self.grow.gamma

    def with_params(self, lam=None, gamma=None):
        g = replace(self.grow, lam=self.grow.lam if lam is None else lam,
                    gamma=self.grow.gamma if gamma is None else gamma)
        return replace(self, grow=g)

    def to_dict(self):
        return {
            "n_trees": self.n_trees,
            "grow": self.grow.to_dict(),
            "family": self.family.value,
            "n_kernels": self.n_kernels,
            "lwmlr_basis": self.lwmlr_basis.value,
            "lwmlr": self.lwmlr.to_dict() if self.lwmlr else None,
            "detrend": self.detrend,
            "cov_update_every": self.cov_update_every,
            "fgls_max_iter": self.fgls_max_iter,
            "fgls_tol": self.fgls_tol,
            "n_bins": self.n_bins,
            "early_stop_patience": self.early_stop_patience,
            "learning_rate": self.learning_rate,
            "fixed_covariance": self.fixed_covariance.to_dict() if self.fixed_covariance else None,
            "dense_cap": self.dense_cap,
            "seed": self.seed,
            "workers": self.workers,
        }

    @classmethod
    def from_dict(cls, obj):
        obj = dict(obj)
        obj["grow"] = GrowConfig.from_dict(obj["grow"])
        if obj.get("lwmlr"):
            obj["lwmlr"] = LwmlrConfig.from_dict(obj["lwmlr"])
        if obj.get("fixed_covariance"):
            obj["fixed_covariance"] = CovarianceParams.from_dict(obj["fixed_covariance"])
        return cls(**obj)


@dataclass
class Ensemble:
    """Fitted additive model.

    ``loss_before[k-1]`` and ``loss_after[k-1]`` are the Mahalanobis losses
    of the residual before and after tree ``k``, both under the covariance
    tree ``k`` was grown with. Because that covariance is re-estimated between
    trees, consecutive trees use different metrics; ``objective_trace``
    chains the per-tree ratios onto the initial loss::

        trace[0] = loss of the raw response
        trace[k] = trace[k-1] * loss_after[k-1] / loss_before[k-1]

    which is the plain loss whenever the covariance is held fixed.
    ``covariance_history[k]`` is the estimate in force after ``k`` trees.
    """

    trees: list
    covariance_history: list
    objective_trace: list
    config: FitConfig
    n_features: int
    feature_names: tuple = ()
    loss_before: list = field(default_factory=list)
    loss_after: list = field(default_factory=list)

    @property
    def leaf_counts(self):
        return [t.n_leaves for t in self.trees]

    def predict(self, features):
        return predict(self, features)


def _is_zero_tree(tree: Tree, tol):
    return tree.n_leaves == 1 and abs(float(tree.leaf_weights[0])) <= tol


def n_trees_effective(ens: Ensemble, tol=0.0):
    """Number of trees up to and including the last one with non-zero output."""
    last = 0
    for k, t in enumerate(ens.trees, start=1):
        if not _is_zero_tree(t, tol):
            last = k
    return last


def fit(ds: SpatialDataset, split: Optional[SplitIndices], cfg: FitConfig) -> Ensemble:
    """Grow up to ``cfg.n_trees`` trees on the training rows of ``ds``.

    FGLS failures after initialization keep the last good covariance.
    Growth stops after ``early_stop_patience`` consecutive root-only trees
    with zero output.
    """
    train = np.arange(ds.n) if split is None else split.train_idx
    if train.size == 0:
        raise ValidationError("training set is empty")
    X = ds.features[train]
    loc = ds.locations[train]
    y = ds.response[train].copy()

    lw = None
    if cfg.fixed_covariance is not None:
        params = cfg.fixed_covariance
    else:
        if cfg.detrend:
            lw = cfg.lwmlr or default_lwmlr_config(loc, cfg.n_kernels, cfg.lwmlr_basis)

        def estimate(res):
            return fgls_estimate(res, loc, lw, cfg.family, cfg.fgls_max_iter, cfg.fgls_tol,
                                 cfg.n_bins, detrend=cfg.detrend).params

        params = estimate(y)
    factor = covariance_factor(params, loc)

    rms = math.sqrt(float(np.mean(y * y)))
    zero_tol = 1e-9 * rms
    r = y
    trees, history, before, after = [], [params], [], []
    trace = [factor.quad(r)]
    zero_run = 0
    for k in range(1, cfg.n_trees + 1):
        state = compute_loss_state(r, factor, cfg.dense_cap)
        before.append(state.loss_value)
        tree = grow_tree(state, X, cfg.grow, cfg.workers)
        if cfg.learning_rate != 1.0:
            tree = tree.scaled(cfg.learning_rate)
        out = tree.leaf_weights[tree.leaf_assignment]
        r = r - out
        after.append(factor.quad(r))
        zero = _is_zero_tree(tree, zero_tol)
        ratio = after[-1] / before[-1] if before[-1] > 0 else 1.0
        if zero:
            # a zero-output tree changes the loss only by rounding
            ratio = 1.0
        trace.append(trace[-1] * ratio)
        trees.append(tree)

        zero_run = zero_run + 1 if zero else 0
        stop = cfg.early_stop_patience > 0 and zero_run >= cfg.early_stop_patience
        # a zero-output tree leaves the residual, hence the estimate, unchanged
        if (cfg.fixed_covariance is None and not zero and not stop
                and k % cfg.cov_update_every == 0):
            try:
                new = estimate(r)
                factor = covariance_factor(new, loc)
                params = new
            except BoostSError as exc:
                log.warning("covariance update after tree %d failed (%s); keeping previous", k, exc)
        history.append(params)
        if stop:
            log.info("early stop after %d trees: %d consecutive zero trees", k, zero_run)
            break

    cfg_snapshot = replace(cfg, lwmlr=lw) if lw is not None else cfg
    return Ensemble(trees, history, trace, cfg_snapshot, X.shape[1], ds.feature_names,
                    before, after)


def predict(ens: Ensemble, features) -> np.ndarray:
    X = np.asarray(features, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != ens.n_features:
        raise ValidationError(f"expected {ens.n_features} feature columns, got {X.shape[1]}")
    out = np.zeros(X.shape[0])
    for t in ens.trees:
        out += t.predict(X)
    return out


def to_dict(ens: Ensemble):
    return {
        "version": MODEL_VERSION,
        "config": ens.config.to_dict(),
        "n_features": ens.n_features,
        "feature_names": list(ens.feature_names),
        "covariance_history": [p.to_dict() for p in ens.covariance_history],
        "objective_trace": [float(v) for v in ens.objective_trace],
        "loss_before": [float(v) for v in ens.loss_before],
        "loss_after": [float(v) for v in ens.loss_after],
        "trees": [t.to_dict() for t in ens.trees],
    }


def from_dict(obj) -> Ensemble:
    if not isinstance(obj, dict) or "version" not in obj:
        raise ModelFormatError("model file has no version field")
    if obj["version"] != MODEL_VERSION:
        raise UnsupportedVersionError(
            f"unsupported model version {obj['version']!r} (expected {MODEL_VERSION})")
    try:
        return Ensemble(
            trees=[Tree.from_dict(t) for t in obj["trees"]],
            covariance_history=[CovarianceParams.from_dict(p) for p in obj["covariance_history"]],
            objective_trace=[float(v) for v in obj["objective_trace"]],
            config=FitConfig.from_dict(obj["config"]),
            n_features=int(obj["n_features"]),
            feature_names=tuple(obj.get("feature_names", ())),
            loss_before=[float(v) for v in obj.get("loss_before", [])],
            loss_after=[float(v) for v in obj.get("loss_after", [])],
        )
    except ModelFormatError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"malformed model file: {exc!r}") from None


def save(ens: Ensemble, path):
    Path(path).write_text(json.dumps(to_dict(ens), indent=1) + "\n", encoding="utf-8")


def load(path) -> Ensemble:
    text = Path(path).read_text(encoding="utf-8")
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}") from None
    return from_dict(obj)
