"""Space-filling search over the regularization pair (lambda, gamma)."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .boosting import FitConfig, fit, n_trees_effective, predict
from .data import SpatialDataset, SplitIndices, split
from .errors import ValidationError

log = logging.getLogger(__name__)

LEAF_WINDOW = (4.0, 16.0)
INNER_FRACTION = 0.8


@dataclass(frozen=True)
class DesignPoint:
    lam: float
    gamma: float
    leaf_count_quartiles: tuple
    n_trees_effective: int
    objective_final: float
    val_rmse: float

    def __post_init__(self):
        q = self.leaf_count_quartiles
        if not q[0] <= q[1] <= q[2]:
            raise ValidationError(f"leaf-count quartiles must be non-decreasing, got {q}")

    def in_window(self, window=LEAF_WINDOW):
        return window[0] <= self.leaf_count_quartiles[1] <= window[1]

    def row(self):
        q25, q50, q75 = self.leaf_count_quartiles
        return {"lambda": self.lam, "gamma": self.gamma, "q25": q25, "q50": q50, "q75": q75,
                "n_trees_effective": self.n_trees_effective, "val_rmse": self.val_rmse}


@dataclass(frozen=True)
class TuneResult:
    points: list
    recommended: DesignPoint
    constrained: bool       # False when no point met the leaf-count window


def maxpro_score(unit):
    """``sum_{i<j} prod_k (x_ik - x_jk)^-2`` over the columns of ``unit``.

    Works on one design ``(n, k)`` or a stack ``(R, n, k)``.
    """
    x = np.asarray(unit, dtype=float)
    single = x.ndim == 2
    if single:
        x = x[None]
    n = x.shape[1]
    if n < 2 or x.shape[2] == 0:
        out = np.zeros(x.shape[0])
    else:
        i, j = np.triu_indices(n, 1)
        diff2 = (x[:, i, :] - x[:, j, :]) ** 2
        with np.errstate(divide="ignore"):
            out = np.sum(1.0 / np.prod(diff2, axis=2), axis=1)
    return float(out[0]) if single else out


def lhd_candidates(n_runs, n_dims, n_candidates, seed):
    """Random Latin hypercubes on the unit cube, every point at its stratum midpoint."""
    rng = np.random.default_rng(seed)
    keys = rng.random((n_candidates, n_dims, n_runs))
    perms = np.argsort(keys, axis=2)
    return (np.transpose(perms, (0, 2, 1)) + 0.5) / n_runs


def _check_range(name, rng_):
    lo, hi = (float(v) for v in rng_)
    if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi or lo < 0:
        raise ValidationError(f"{name} range must satisfy 0 <= lo <= hi, got [{lo}, {hi}]")
    if lo == hi:
        log.warning("%s range is degenerate; fixing it at %g", name, lo)
    return lo, hi


def space_filling_design(n_runs: int, lambda_range: Sequence[float] = (0.0, 0.1),
                         gamma_range: Sequence[float] = (0.0, 10.0), seed: int = 0,
                         n_candidates: int = 2000):
    """Best of ``n_candidates`` random Latin hypercubes under the MaxPro criterion.

    Returns ``n_runs`` pairs ``(lambda, gamma)``. A degenerate range fixes
    that coordinate and drops it from the criterion.
    """
    if n_runs < 1 or n_candidates < 1:
        raise ValidationError("n_runs and n_candidates must be >= 1")
    ranges = [_check_range("lambda", lambda_range), _check_range("gamma", gamma_range)]
    cands = lhd_candidates(n_runs, 2, n_candidates, seed)
    live = [k for k, (lo, hi) in enumerate(ranges) if hi > lo]
    scores = maxpro_score(cands[:, :, live])
    best = cands[int(np.argmin(scores))]
    lo = np.array([r[0] for r in ranges])
    hi = np.array([r[1] for r in ranges])
    pts = lo + best * (hi - lo)
    return [(float(a), float(b)) for a, b in pts]


def _leaf_quartiles(counts):
    q = np.percentile(np.asarray(counts, dtype=float), [25, 50, 75])
    return tuple(float(v) for v in q)


def evaluate_point(ds: SpatialDataset, inner: SplitIndices, base_cfg: FitConfig, lam, gamma):
    cfg = base_cfg.with_params(lam, gamma)
    ens = fit(ds, inner, cfg)
    val = inner.test_idx
    pred = predict(ens, ds.features[val])
    rmse = math.sqrt(float(np.mean((ds.response[val] - pred) ** 2)))
    tol = 1e-9 * math.sqrt(float(np.mean(ds.response[inner.train_idx] ** 2)))
    return DesignPoint(float(lam), float(gamma), _leaf_quartiles(ens.leaf_counts),
                       n_trees_effective(ens, tol), float(ens.objective_trace[-1]), rmse)


def _run_design(sub, inner, base_cfg, design, workers):
    lams = [float(a) for a, _ in design]
    gams = [float(b) for _, b in design]
    if workers > 1 and len(design) > 1:
        with ProcessPoolExecutor(min(workers, len(design))) as pool:
            return list(pool.map(evaluate_point, [sub] * len(design), [inner] * len(design),
                                 [base_cfg] * len(design), lams, gams))
    return [evaluate_point(sub, inner, base_cfg, a, b) for a, b in zip(lams, gams)]


def recommend(points: Sequence[DesignPoint], window=LEAF_WINDOW):
    """Lowest validation RMSE among points whose median leaf count is in ``window``.

    Ties go to the earlier point. Falls back to the unconstrained minimum
    (with a warning) when no point qualifies.
    """
    if not points:
        raise ValidationError("design is empty")
    ok = [p for p in points if p.in_window(window)]
    constrained = bool(ok)
    if not ok:
        log.warning("no design point has median leaf count in [%g, %g]; "
                    "recommending the unconstrained RMSE minimizer", *window)
        ok = list(points)
    best = min(range(len(ok)), key=lambda i: (ok[i].val_rmse, i))
    return ok[best], constrained


def tune(ds: SpatialDataset, split_: Optional[SplitIndices], base_cfg: FitConfig,
         design: Sequence, workers: int = 1, refine: int = 0, seed: int = 0) -> TuneResult:
    """Fit one ensemble per design point on an inner 80/20 split of the training rows.

    With ``refine > 0`` a second ``refine``-run design is laid over the
    bounding box of the three best points and appended.
    """
    design = [tuple(p) for p in design]
    if not design:
        raise ValidationError("design is empty")
    train = np.arange(ds.n) if split_ is None else split_.train_idx
    if train.size < 2:
        raise ValidationError("need at least two training rows to tune")
    sub = ds.subset(train)
    inner = split(sub, INNER_FRACTION, seed)
    points = _run_design(sub, inner, base_cfg, design, workers)
    if refine > 0:
        ranked = sorted(range(len(points)), key=lambda i: (points[i].val_rmse, i))[:3]
        lams = [points[i].lam for i in ranked]
        gams = [points[i].gamma for i in ranked]
        second = space_filling_design(refine, (min(lams), max(lams)), (min(gams), max(gams)),
                                      seed + 1)
        points += _run_design(sub, inner, base_cfg, second, workers)
    best, constrained = recommend(points)
    return TuneResult(points, best, constrained)
