"""Synthetic spatial data with a known mean function and Gaussian noise field.

All randomness comes from numpy's PCG64 bit generator
(``numpy.random.default_rng(seed)``), drawn in a fixed order: locations,
then features, then the noise vector.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass

import numpy as np

from .covariance import CovarianceParams, covariance_factor
from .data import SpatialDataset, find_duplicate_rows
from .errors import ValidationError

DOMAIN = 10.0


class Layout(str, enum.Enum):
    GRID = "grid"
    UNIFORM = "uniform"


class MeanFn(str, enum.Enum):
    ZERO = "zero"
    LINEAR = "linear"
    FRIEDMAN = "friedman"
    CUSTOM = "custom"


class FeatureGen(str, enum.Enum):
    COORDINATES = "coordinates"
    UNIFORM = "uniform"


@dataclass(frozen=True)
class SimSpec:
    n: int
    cov: CovarianceParams
    d: int = 2
    layout: Layout = Layout.UNIFORM
    mean_fn: MeanFn = MeanFn.FRIEDMAN
    expression: str = ""
    feature_gen: FeatureGen = FeatureGen.UNIFORM
    m: int = 5
    seed: int = 0

    def __post_init__(self):
        for name, kind in (("layout", Layout), ("mean_fn", MeanFn), ("feature_gen", FeatureGen)):
            object.__setattr__(self, name, kind(getattr(self, name)))
        if self.n < 2:
            raise ValidationError("n must be >= 2")
        if self.d not in (1, 2, 3):
            raise ValidationError("d must be 1, 2 or 3")
        if self.feature_gen is FeatureGen.UNIFORM and self.m < 1:
            raise ValidationError("m must be >= 1")
        if self.mean_fn is MeanFn.CUSTOM and not self.expression:
            raise ValidationError("custom mean needs an expression")
        if self.seed < 0:
            raise ValidationError("seed must be non-negative")

    @property
    def n_features(self):
        return self.d if self.feature_gen is FeatureGen.COORDINATES else self.m

    def to_dict(self):
        return {"n": self.n, "d": self.d, "layout": self.layout.value,
                "mean_fn": self.mean_fn.value, "expression": self.expression,
                "feature_gen": self.feature_gen.value, "m": self.m,
                "cov": self.cov.to_dict(), "seed": self.seed}


def make_locations(layout, n, d, seed=0, rng=None):
    """Grid: the smallest ``k**d >= n`` lattice on ``[0, 10]^d``, first ``n``
    points in row-major order. Uniform: i.i.d. draws, colliding rows redrawn."""
    layout = Layout(layout)
    if layout is Layout.GRID:
        k = max(2, math.ceil(round(n ** (1.0 / d), 9)))
        while k ** d < n:
            k += 1
        axes = [np.linspace(0.0, DOMAIN, k)] * d
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
        return pts[:n].copy()
    rng = np.random.default_rng(seed) if rng is None else rng
    loc = rng.uniform(0.0, DOMAIN, size=(n, d))
    while (dup := find_duplicate_rows(loc)) is not None:
        loc[dup[1]] = rng.uniform(0.0, DOMAIN, size=d)
    return loc


def friedman(X):
    """``10 sin(pi x1 x2) + 20 (x3 - 0.5)^2 + 10 x4 + 5 x5``, truncated to the
    available columns (a lone column is used for both x1 and x2)."""
    X = np.asarray(X, dtype=float)
    m = X.shape[1]
    x2 = X[:, 1] if m > 1 else X[:, 0]
    z = 10.0 * np.sin(np.pi * X[:, 0] * x2)
    if m > 2:
        z += 20.0 * (X[:, 2] - 0.5) ** 2
    if m > 3:
        z += 10.0 * X[:, 3]
    if m > 4:
        z += 5.0 * X[:, 4]
    return z


def linear_mean(X):
    """``1 + sum_j (j + 1) x_j``."""
    X = np.asarray(X, dtype=float)
    return 1.0 + X @ np.arange(1, X.shape[1] + 1, dtype=float)


_SAFE = {name: getattr(np, name) for name in
         ("sin", "cos", "tan", "exp", "log", "sqrt", "abs", "tanh", "arctan", "pi", "e",
          "minimum", "maximum", "where")}


def custom_mean(expression, X, S):
    """Evaluate a numpy expression in ``x1..xm`` and ``s1..sd``."""
    env = dict(_SAFE)
    env.update({f"x{j + 1}": X[:, j] for j in range(X.shape[1])})
    env.update({f"s{j + 1}": S[:, j] for j in range(S.shape[1])})
    try:
        out = eval(compile(expression, "<mean>", "eval"), {"__builtins__": {}}, env)
    except Exception as exc:
        raise ValidationError(f"cannot evaluate mean expression {expression!r}: {exc}") from None
    return np.broadcast_to(np.asarray(out, dtype=float), (X.shape[0],)).copy()


def mean_values(spec: SimSpec, X, S):
    if spec.mean_fn is MeanFn.ZERO:
        return np.zeros(X.shape[0])
    if spec.mean_fn is MeanFn.LINEAR:
        return linear_mean(X)
    if spec.mean_fn is MeanFn.FRIEDMAN:
        return friedman(X)
    return custom_mean(spec.expression, X, S)


def simulate(spec: SimSpec):
    """Return ``(dataset, mean)`` with ``y = mean + L z``."""
    rng = np.random.default_rng(spec.seed)
    S = make_locations(spec.layout, spec.n, spec.d, rng=rng)
    if spec.feature_gen is FeatureGen.COORDINATES:
        X = S.copy()
    else:
        X = rng.uniform(0.0, 1.0, size=(spec.n, spec.m))
    mu = mean_values(spec, X, S)
    factor = covariance_factor(spec.cov, S)
    eps = factor.lower @ rng.standard_normal(spec.n)
    ds = SpatialDataset(S, X, mu + eps)
    return ds, mu


def truth_json(spec: SimSpec):
    desc = {
        MeanFn.ZERO: "0",
        MeanFn.LINEAR: "1 + sum_j (j+1) x_j",
        MeanFn.FRIEDMAN: "10 sin(pi x1 x2) + 20 (x3-0.5)^2 + 10 x4 + 5 x5 (truncated to m)",
        MeanFn.CUSTOM: spec.expression,
    }[spec.mean_fn]
    return json.dumps({"spec": spec.to_dict(), "mean": desc, "generator": "numpy PCG64"},
                      indent=1)
