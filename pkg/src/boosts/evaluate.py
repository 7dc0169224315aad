"""Out-of-sample metrics, the paired signed-rank test and the two baselines."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy.stats import norm, rankdata

from .boosting import Ensemble, FitConfig, fit, predict
from .covariance import CovarianceParams, Family, FglsResult, fgls
from .data import SpatialDataset, SplitIndices, split
from .errors import DegenerateTestError, RankDeficientError, ValidationError
from .simulate import SimSpec, simulate

METHODS = ("boost_s", "identity_boosting", "gls_regression", "ols_regression")
EXACT_CUTOFF = 12


@dataclass(frozen=True)
class MetricReport:
    mge: float
    re_percent: float
    rmse: float
    n_test: int

    def to_dict(self):
        return {"mge": self.mge, "re_percent": self.re_percent, "rmse": self.rmse,
                "n_test": self.n_test}


def metrics(y_true, y_pred, pointwise_re=False) -> MetricReport:
    """Mean absolute error, relative error (in %) and RMSE.

    The relative error is ``100 * sum|e| / sum|y|`` by default; with
    ``pointwise_re`` it is the mean of ``|e_i| / |y_i|`` instead.
    """
    y = np.asarray(y_true, dtype=float)
    p = np.asarray(y_pred, dtype=float)
    if y.shape != p.shape or y.ndim != 1 or y.size == 0:
        raise ValidationError(f"need equal non-empty vectors, got {y.shape} and {p.shape}")
    e = np.abs(y - p)
    mge = float(np.mean(e))
    rmse = math.sqrt(float(np.mean(e * e)))
    if pointwise_re:
        if np.any((y == 0) & (e > 0)):
            raise ValidationError("relative error undefined: zero response with non-zero error")
        with np.errstate(invalid="ignore", divide="ignore"):
            ratio = np.where(e == 0, 0.0, e / np.abs(y))
        re = 100.0 * float(np.mean(ratio))
    else:
        denom = float(np.sum(np.abs(y)))
        if denom == 0.0:
            if np.any(e > 0):
                raise ValidationError("relative error undefined: sum |y| is zero")
            re = 0.0
        else:
            re = 100.0 * float(np.sum(e)) / denom
    return MetricReport(mge, re, rmse, int(y.size))


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank
# ---------------------------------------------------------------------------

def _signed_ranks(a, b):
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    d = d[d != 0]
    if d.size == 0:
        raise DegenerateTestError("all paired differences are zero")
    ranks = rankdata(np.abs(d))
    return d, ranks


def exact_null_counts(ranks):
    """Number of sign assignments reaching each doubled positive-rank sum."""
    v = np.rint(2 * np.asarray(ranks)).astype(np.int64)
    counts = np.zeros(int(v.sum()) + 1)
    counts[0] = 1.0
    for x in v:
        shifted = np.zeros_like(counts)
        shifted[x:] = counts[: counts.size - x]
        counts = counts + shifted
    return counts


def wilcoxon_one_sided(a, b, method="auto"):
    """p-value of the paired signed-rank test for the alternative ``a < b``.

    Zero differences are dropped and tied magnitudes get mid-ranks. The
    statistic is the positive-rank sum; small values favour ``a``. With
    ``method="auto"`` the null distribution is exact (counted over all sign
    assignments) for up to 12 non-zero differences, else a normal
    approximation with tie and continuity corrections.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValidationError("paired samples must be equal-length vectors")
    if a.size < 5:
        raise ValidationError("need at least 5 pairs")
    d, ranks = _signed_ranks(a, b)
    n = d.size
    t_plus = float(ranks[d > 0].sum())
    if method == "auto":
        method = "exact" if n <= EXACT_CUTOFF else "approx"
    if method == "exact":
        counts = exact_null_counts(ranks)
        k = int(round(2 * t_plus))
        return float(counts[: k + 1].sum() / 2.0 ** n)
    if method != "approx":
        raise ValidationError(f"unknown method {method!r}")
    mean = n * (n + 1) / 4.0
    _, tie_sizes = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_sizes ** 3 - tie_sizes)) / 48.0
    if var <= 0:
        raise DegenerateTestError("signed-rank variance is zero")
    z = (t_plus - mean + 0.5) / math.sqrt(var)
    return float(norm.cdf(z))


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------

def baseline_identity_boosting(ds: SpatialDataset, split_: Optional[SplitIndices],
                               cfg: FitConfig) -> Ensemble:
    """The same boosting pipeline with the covariance pinned to the identity."""
    return fit(ds, split_, replace(cfg, fixed_covariance=CovarianceParams.identity()))


@dataclass(frozen=True)
class LinearFit:
    coef: np.ndarray
    params: Optional[CovarianceParams]
    predictions: np.ndarray     # on the test rows

    def predict(self, features):
        X = np.asarray(features, dtype=float)
        return self.coef[0] + X @ self.coef[1:]


def baseline_gls_regression(ds: SpatialDataset, split_: Optional[SplitIndices],
                            family=Family.GAUSSIAN, method="fgls", max_iter=10, tol=1e-4,
                            n_bins=15, fixed_covariance: Optional[CovarianceParams] = None):
    """Linear regression on ``[1, features]``, by FGLS or plain OLS.

    Test predictions use covariates only.
    """
    train = np.arange(ds.n) if split_ is None else split_.train_idx
    test = np.arange(ds.n) if split_ is None else split_.test_idx
    X = np.column_stack([np.ones(train.size), ds.features[train]])
    y = ds.response[train]
    loc = ds.locations[train]
    if method == "ols":
        if np.linalg.matrix_rank(X) < X.shape[1] or X.shape[0] <= X.shape[1]:
            raise RankDeficientError("regression design is rank deficient")
        coef, *_ = np.linalg.lstsq(X, y, rcond=None)
        params = None
    elif method == "fgls":
        res: FglsResult = fgls(y, X, loc, family, max_iter, tol, n_bins,
                               fixed_params=fixed_covariance)
        coef, params = res.coef, res.params
    else:
        raise ValidationError(f"unknown method {method!r}")
    fitted = LinearFit(np.asarray(coef), params, np.empty(0))
    return replace(fitted, predictions=fitted.predict(ds.features[test]))


# ---------------------------------------------------------------------------
# comparison study
# ---------------------------------------------------------------------------

@dataclass
class Comparison:
    """Per-replicate test metrics for every method plus paired p-values."""

    methods: tuple
    reports: list           # one dict method -> MetricReport per replicate

    def column(self, method, metric):
        return np.array([getattr(r[method], metric) for r in self.reports])

    def p_values(self, metric, reference="boost_s"):
        ref = self.column(reference, metric)
        out = {}
        for m in self.methods:
            if m == reference:
                continue
            try:
                out[m] = wilcoxon_one_sided(ref, self.column(m, metric))
            except DegenerateTestError:
                out[m] = float("nan")
        return out

    def win_rate(self, metric, other, reference="boost_s"):
        return float(np.mean(self.column(reference, metric) < self.column(other, metric)))

    def to_csv(self, path, metric):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("replicate," + ",".join(self.methods) + "\n")
            for i, r in enumerate(self.reports):
                fh.write(f"{i}," + ",".join(repr(getattr(r[m], metric)) for m in self.methods) + "\n")
            p = self.p_values(metric)
            fh.write("wilcoxon_p," + ",".join("NA" if m == "boost_s" else repr(p[m])
                                              for m in self.methods) + "\n")


def run_replicate(spec: SimSpec, fraction: float, cfg: FitConfig, split_seed=None):
    ds, _ = simulate(spec)
    sp = split(ds, fraction, spec.seed if split_seed is None else split_seed)
    yt = ds.response[sp.test_idx]
    Xt = ds.features[sp.test_idx]
    out = {}
    out["boost_s"] = metrics(yt, predict(fit(ds, sp, cfg), Xt))
    out["identity_boosting"] = metrics(yt, predict(baseline_identity_boosting(ds, sp, cfg), Xt))
    gls = baseline_gls_regression(ds, sp, cfg.family, "fgls", cfg.fgls_max_iter, cfg.fgls_tol,
                                  cfg.n_bins)
    out["gls_regression"] = metrics(yt, gls.predictions)
    out["ols_regression"] = metrics(yt, baseline_gls_regression(ds, sp, method="ols").predictions)
    return out


def compare(spec: SimSpec, n_replicates: int, fraction: float, cfg: FitConfig,
            workers=1) -> Comparison:
    """Replicate ``r`` simulates with seed ``spec.seed + r`` and splits with the same seed."""
    specs = [replace(spec, seed=spec.seed + r) for r in range(n_replicates)]
    args = [(s, fraction, cfg) for s in specs]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            reports = list(pool.map(run_replicate, *zip(*args)))
    else:
        reports = [run_replicate(*a) for a in args]
    return Comparison(METHODS, reports)
