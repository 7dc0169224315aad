"""Spatial datasets: validation, CSV input/output and train/test splitting."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    DuplicateCoordinateError,
    ParseError,
    SchemaError,
    ValidationError,
)


def _frozen(a, ndim):
    arr = np.array(a, dtype=np.float64)
    if arr.ndim == 1 and ndim == 2:
        arr = arr[:, None]
    if arr.ndim != ndim:
        raise ValidationError(f"expected a {ndim}-d array, got shape {arr.shape}")
    arr.flags.writeable = False
    return arr


def find_duplicate_rows(locations):
    """Return the first pair ``(i, j)``, ``i < j``, of identical rows, or None."""
    seen = {}
    for j, row in enumerate(np.asarray(locations)):
        key = tuple(float(v) for v in row)
        if key in seen:
            return seen[key], j
        seen[key] = j
    return None


@dataclass(frozen=True)
class SpatialDataset:
    """Locations, features and response for ``n`` spatial samples.

    Arrays are copied and made read-only on construction.
    """

    locations: np.ndarray
    features: np.ndarray
    response: np.ndarray
    feature_names: tuple = ()
    coord_names: tuple = ()
    response_name: str = "y"

    def __post_init__(self):
        loc = _frozen(self.locations, 2)
        feat = _frozen(self.features, 2)
        resp = _frozen(self.response, 1)
        n = resp.shape[0]
        if n < 1:
            raise ValidationError("dataset must contain at least one sample")
        if loc.shape[0] != n or feat.shape[0] != n:
            raise ValidationError(
                f"row counts differ: locations {loc.shape[0]}, "
                f"features {feat.shape[0]}, response {n}"
            )
        if not 1 <= loc.shape[1] <= 3:
            raise ValidationError(f"locations must have 1 to 3 columns, got {loc.shape[1]}")
        for name, arr in (("locations", loc), ("features", feat), ("response", resp)):
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"{name} contains non-finite values")
        dup = find_duplicate_rows(loc)
        if dup is not None:
            i, j = dup
            raise DuplicateCoordinateError(
                f"duplicate coordinates at rows {i + 1} and {j + 1}", rows=(i + 1, j + 1)
            )
        names = tuple(self.feature_names) or tuple(f"x{k + 1}" for k in range(feat.shape[1]))
        if len(names) != feat.shape[1]:
            raise ValidationError("feature_names length does not match feature columns")
        coords = tuple(self.coord_names) or tuple(f"s{k + 1}" for k in range(loc.shape[1]))
        if len(coords) != loc.shape[1]:
            raise ValidationError("coord_names length does not match location columns")
        object.__setattr__(self, "locations", loc)
        object.__setattr__(self, "features", feat)
        object.__setattr__(self, "response", resp)
        object.__setattr__(self, "feature_names", names)
        object.__setattr__(self, "coord_names", coords)

    @property
    def n(self):
        return self.response.shape[0]

    @property
    def m(self):
        return self.features.shape[1]

    @property
    def d(self):
        return self.locations.shape[1]

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.intp)
        return SpatialDataset(
            self.locations[idx],
            self.features[idx],
            self.response[idx],
            self.feature_names,
            self.coord_names,
            self.response_name,
        )


def load_csv(path, coord_cols: Sequence[str], feature_cols: Sequence[str], response_col: str):
    """Read a dataset from a comma-separated file with a header row.

    Rows are numbered from 1 (the first data line) in error messages.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: file is empty, header row missing") from None
        index = {name: k for k, name in enumerate(header)}

        def col(name, role):
            if name not in index:
                raise SchemaError(f"{role} not found: column {name!r} missing from {path}")
            return index[name]

        c_idx = [col(c, "coord_col") for c in coord_cols]
        f_idx = [col(c, "feature_col") for c in feature_cols]
        r_idx = col(response_col, "response_col")
        wanted = c_idx + f_idx + [r_idx]

        rows = []
        for lineno, raw in enumerate(reader, start=1):
            if not raw or all(not cell.strip() for cell in raw):
                continue
            if len(raw) < len(header):
                raise ParseError(
                    f"{path}: row {lineno} has {len(raw)} fields, expected {len(header)}",
                    row=lineno,
                )
            vals = []
            for k in wanted:
                cell = raw[k].strip()
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise ParseError(
                        f"{path}: non-numeric value {cell!r} at row {lineno}, column {header[k]!r}",
                        row=lineno,
                        column=header[k],
                    ) from None
            rows.append(vals)

    if not rows:
        raise ValidationError(f"{path}: no data rows")
    table = np.array(rows, dtype=np.float64)
    nc, nf = len(c_idx), len(f_idx)
    return SpatialDataset(
        locations=table[:, :nc],
        features=table[:, nc : nc + nf],
        response=table[:, nc + nf],
        feature_names=tuple(feature_cols),
        coord_names=tuple(coord_cols),
        response_name=response_col,
    )


def _fmt(v):
    return repr(float(v))


def write_csv(ds: SpatialDataset, path, extra_columns=None):
    """Write a dataset so that :func:`load_csv` reads it back exactly.

    ``repr`` of a float is the shortest string that round-trips, which is
    never longer than 17 significant digits.
    """
    extra_columns = extra_columns or {}
    header = list(ds.coord_names) + list(ds.feature_names) + [ds.response_name]
    header += list(extra_columns)
    cols = [ds.locations, ds.features, ds.response[:, None]]
    cols += [np.asarray(v, dtype=float)[:, None] for v in extra_columns.values()]
    table = np.hstack(cols)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in table:
            w.writerow([_fmt(v) for v in row])


@dataclass(frozen=True)
class SplitIndices:
    train: tuple
    test: tuple
    fraction: float
    seed: int

    def to_json(self):
        return json.dumps(
            {"seed": self.seed, "fraction": self.fraction,
             "train": list(self.train), "test": list(self.test)}
        )

    @classmethod
    def from_json(cls, text):
        obj = json.loads(text)
        return cls(tuple(int(i) for i in obj["train"]), tuple(int(i) for i in obj["test"]),
                   float(obj["fraction"]), int(obj["seed"]))

    @property
    def train_idx(self):
        return np.asarray(self.train, dtype=np.intp)

    @property
    def test_idx(self):
        return np.asarray(self.test, dtype=np.intp)


def round_half_away(x):
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def split_sizes(n, fraction):
    if not 0.0 < fraction < 1.0:
        raise ValidationError(f"fraction must lie in (0, 1), got {fraction}")
    if n < 2:
        raise ValidationError(f"need at least 2 samples to split, got {n}")
    k = round_half_away(fraction * n)
    return min(max(k, 1), n - 1)


def split(ds_or_n, fraction: float, seed: int) -> SplitIndices:
    """Random train/test partition; ``fraction`` is the training share.

    Accepts a dataset or a sample count. The permutation comes from numpy's
    PCG64 generator seeded with ``seed``.
    """
    n = ds_or_n if isinstance(ds_or_n, (int, np.integer)) else ds_or_n.n
    k = split_sizes(int(n), fraction)
    if seed < 0:
        raise ValidationError("seed must be non-negative")
    perm = np.random.default_rng(seed).permutation(n)
    train = tuple(int(i) for i in np.sort(perm[:k]))
    test = tuple(int(i) for i in np.sort(perm[k:]))
    return SplitIndices(train, test, float(fraction), int(seed))
