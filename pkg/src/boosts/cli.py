"""Command-line entry point: ``boosts {simulate,fit,predict,evaluate,tune,compare}``.

Every option can come from a YAML file given with ``--config`` (flat keys,
or one level of nesting joined with ``_``, e.g. ``cov: {sill: 1}`` is
``cov_sill``); flags given on the command line win. Exit codes: 0 success,
2 usage or validation error, 3 numerical failure, 4 I/O failure. Errors are
reported as one JSON line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import re
import sys
from pathlib import Path

import numpy as np
import yaml

from . import boosting
from .boosting import FitConfig
from .covariance import CovarianceParams, empirical_semivariogram, fgls_estimate
from .data import load_csv, split, write_csv
from .errors import BoostSError, NumericalError
from .evaluate import compare, metrics
from .simulate import SimSpec, simulate, truth_json
from .tree import GrowConfig
from .tune import space_filling_design, tune

log = logging.getLogger("boosts")

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _bool(text):
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# (key, type, default, help)
COMMON = [
    ("seed", int, 0, "random seed"),
    ("workers", int, 1, "parallel workers"),
    ("out", str, ".", "output directory"),
]
DATA = [
    ("data", str, None, "input dataset CSV"),
    ("coord_cols", str, "", "comma-separated coordinate columns (default: s1, s2, ...)"),
    ("feature_cols", str, "", "comma-separated feature columns (default: x1, x2, ...)"),
    ("response_col", str, "y", "response column"),
]
SIM = [
    ("n", int, 300, "number of locations"),
    ("d", int, 2, "spatial dimension"),
    ("layout", str, "uniform", "grid or uniform"),
    ("mean_fn", str, "friedman", "zero, linear, friedman or custom"),
    ("expression", str, "", "numpy expression for a custom mean"),
    ("feature_gen", str, "uniform", "uniform or coordinates"),
    ("m", int, 5, "number of uniform features"),
    ("cov_nugget", float, 0.05, "nugget"),
    ("cov_sill", float, 1.0, "partial sill"),
    ("cov_range", float, 1.5, "range"),
    ("cov_family", str, "gaussian", "gaussian or exponential"),
]
FIT = [
    ("train_fraction", float, 1.0, "training share; 1 uses every row"),
    ("n_trees", int, 50, "maximum number of trees"),
    ("lambda", float, 0.05, "L2 penalty on leaf weights"),
    ("gamma", float, 4.25, "penalty per leaf"),
    ("max_leaves", int, 64, "leaf cap per tree"),
    ("min_leaf_size", int, 5, "smallest leaf"),
    ("system_form", str, "consistent", "consistent or paper_literal"),
    ("family", str, "gaussian", "covariance family"),
    ("n_kernels", int, 4, "LWMLR kernels"),
    ("lwmlr_basis", str, "constant", "constant or linear"),
    ("detrend", _bool, True, "detrend residuals before variogram estimation"),
    ("cov_update_every", int, 1, "trees between covariance updates"),
    ("fgls_max_iter", int, 10, "FGLS iterations"),
    ("fgls_tol", float, 1e-4, "FGLS tolerance"),
    ("n_bins", int, 15, "variogram bins"),
    ("early_stop_patience", int, 3, "consecutive zero trees before stopping; 0 disables"),
    ("learning_rate", float, 1.0, "shrinkage of each tree"),
    ("identity", _bool, False, "fix the covariance to the identity"),
]
TUNE = [
    ("n_runs", int, 16, "design size"),
    ("lambda_lo", float, 0.0, ""), ("lambda_hi", float, 0.1, ""),
    ("gamma_lo", float, 0.0, ""), ("gamma_hi", float, 10.0, ""),
    ("n_candidates", int, 2000, "random Latin hypercubes scored"),
    ("refine", int, 0, "size of the refinement design; 0 skips it"),
]
COMPARE = [
    ("replicates", int, 20, "number of simulated replicates"),
]

COMMANDS = {
    "simulate": COMMON + SIM,
    "fit": COMMON + DATA + FIT,
    "predict": COMMON + [("model", str, None, "model JSON"), ("data", str, None, "input CSV"),
                         ("feature_cols", str, "", "feature columns (default: from the model)")],
    "evaluate": COMMON + [("truth", str, None, "CSV with the observed response"),
                          ("predictions", str, None, "CSV with a prediction column"),
                          ("response_col", str, "y", "response column in the truth file"),
                          ("pointwise_re", _bool, False, "mean of per-point relative errors")],
    "tune": COMMON + DATA + FIT + TUNE,
    "compare": COMMON + SIM + [o for o in FIT if o[0] != "identity"] + COMPARE,
}
COMPARE_DEFAULTS = {"train_fraction": 0.15}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="boosts", description="Spatially correlated gradient boosting.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, opts in COMMANDS.items():
        sp = sub.add_parser(name)
        sp.add_argument("--config", default=None, help="YAML file with option values")
        for key, kind, _default, help_ in opts:
            sp.add_argument("--" + key.replace("_", "-"), dest=key, type=kind, default=None,
                            help=help_)
    return p


def _flatten(obj, prefix=""):
    out = {}
    for k, v in obj.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "_"))
        else:
            out[key] = v
    return out


def resolve_options(command, args):
    """Defaults, then the config file, then command-line flags."""
    opts = COMMANDS[command]
    values = {k: d for k, _, d, _ in opts}
    if command == "compare":
        values.update(COMPARE_DEFAULTS)
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise UsageError(f"cannot parse config {path}: {exc}") from None
        if not isinstance(raw, dict):
            raise UsageError("config must be a mapping")
        types = {k: t for k, t, _, _ in opts}
        for key, val in _flatten(raw).items():
            key = key.replace("-", "_")
            if key not in types:
                raise UsageError(f"unknown config key {key!r} for command {command}")
            try:
                values[key] = types[key](val)
            except (TypeError, ValueError) as exc:
                raise UsageError(f"bad value for {key}: {exc}") from None
    for key, _, _, _ in opts:
        v = getattr(args, key)
        if v is not None:
            values[key] = v
    for key, _, default, _ in opts:
        if default is None and values[key] is None:
            raise UsageError(f"missing required option --{key.replace('_', '-')}")
    return values


# ---------------------------------------------------------------------------
# option -> library objects
# ---------------------------------------------------------------------------

def sim_spec(o, seed=None):
    cov = CovarianceParams(o["cov_nugget"], o["cov_sill"], o["cov_range"], o["cov_family"])
    return SimSpec(n=o["n"], cov=cov, d=o["d"], layout=o["layout"], mean_fn=o["mean_fn"],
                   expression=o["expression"], feature_gen=o["feature_gen"], m=o["m"],
                   seed=o["seed"] if seed is None else seed)


def fit_config(o):
    grow = GrowConfig(lam=o["lambda"], gamma=o["gamma"], max_leaves=o["max_leaves"],
                      min_leaf_size=o["min_leaf_size"], system_form=o["system_form"])
    fixed = CovarianceParams.identity() if o.get("identity") else None
    return FitConfig(n_trees=o["n_trees"], grow=grow, family=o["family"],
                     n_kernels=o["n_kernels"], lwmlr_basis=o["lwmlr_basis"],
                     detrend=o["detrend"], cov_update_every=o["cov_update_every"],
                     fgls_max_iter=o["fgls_max_iter"], fgls_tol=o["fgls_tol"],
                     n_bins=o["n_bins"], early_stop_patience=o["early_stop_patience"],
                     learning_rate=o["learning_rate"], fixed_covariance=fixed,
                     seed=o["seed"], workers=o["workers"])


def _header(path):
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"input file not found: {p}")
    with p.open(newline="", encoding="utf-8") as fh:
        return [h.strip() for h in next(csv.reader(fh), [])]


def _numbered(header, letter):
    cols = [h for h in header if re.fullmatch(letter + r"\d+", h)]
    return sorted(cols, key=lambda c: int(c[1:]))


def _cols(text):
    return [c.strip() for c in text.split(",") if c.strip()]


def load_dataset(o):
    header = _header(o["data"])
    coords = _cols(o["coord_cols"]) or _numbered(header, "s")
    feats = _cols(o["feature_cols"]) or _numbered(header, "x")
    return load_csv(o["data"], coords, feats, o["response_col"])


def _split_for(ds, o):
    if o["train_fraction"] >= 1.0:
        return None
    return split(ds, o["train_fraction"], o["seed"])


def _outdir(o):
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_simulate(o):
    spec = sim_spec(o)
    ds, _ = simulate(spec)
    out = _outdir(o)
    write_csv(ds, out / "dataset.csv")
    (out / "truth.json").write_text(truth_json(spec) + "\n", encoding="utf-8")
    return {"dataset": str(out / "dataset.csv"), "n": ds.n}


def write_trace(ens, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("tree_index,objective,n_leaves\n")
        fh.write(f"0,{ens.objective_trace[0]!r},0\n")
        for k, (t, obj) in enumerate(zip(ens.trees, ens.objective_trace[1:]), start=1):
            fh.write(f"{k},{obj!r},{t.n_leaves}\n")


def write_variogram(ens, ds, train, path):
    """Empirical semivariogram of the final training residuals plus the model curve."""
    loc = ds.locations[train]
    res = ds.response[train] - boosting.predict(ens, ds.features[train])
    cfg = ens.config
    if cfg.fixed_covariance is None:
        est = fgls_estimate(res, loc, cfg.lwmlr, cfg.family, cfg.fgls_max_iter, cfg.fgls_tol,
                            cfg.n_bins, detrend=cfg.detrend)
        emp, params = est.variogram, est.params
    else:
        emp, params = empirical_semivariogram(res, loc, cfg.n_bins), cfg.fixed_covariance
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("bin_center,semivariance,pair_count,fitted\n")
        for h, g, c in zip(emp.bin_centers, emp.semivariances, emp.pair_counts):
            fh.write(f"{float(h)!r},{float(g)!r},{int(c)},{float(params.variogram(h))!r}\n")


def cmd_fit(o):
    ds = load_dataset(o)
    cfg = fit_config(o)
    sp = _split_for(ds, o)
    ens = boosting.fit(ds, sp, cfg)
    out = _outdir(o)
    boosting.save(ens, out / "model.json")
    write_trace(ens, out / "trace.csv")
    train = np.arange(ds.n) if sp is None else sp.train_idx
    write_variogram(ens, ds, train, out / "variogram.csv")
    if sp is not None:
        (out / "split.json").write_text(sp.to_json() + "\n", encoding="utf-8")
    return {"model": str(out / "model.json"), "n_trees": len(ens.trees),
            "objective": ens.objective_trace[-1]}


def cmd_predict(o):
    model_path = Path(o["model"])
    if not model_path.is_file():
        raise UsageError(f"model file not found: {model_path}")
    ens = boosting.load(model_path)
    header = _header(o["data"])
    feats = _cols(o["feature_cols"]) or list(ens.feature_names) or _numbered(header, "x")
    missing = [c for c in feats if c not in header]
    if missing:
        raise UsageError(f"feature_col not found: {missing}")
    idx = [header.index(c) for c in feats]
    rows = []
    with open(o["data"], newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        for lineno, raw in enumerate(reader, start=1):
            if not raw:
                continue
            try:
                rows.append([float(raw[k]) for k in idx])
            except (ValueError, IndexError):
                raise UsageError(f"row {lineno}: cannot read feature values") from None
    X = np.array(rows, dtype=float).reshape(len(rows), len(feats))
    pred = boosting.predict(ens, X)
    out = _outdir(o)
    with open(out / "predictions.csv", "w", encoding="utf-8") as fh:
        fh.write("row,prediction\n")
        for i, v in enumerate(pred, start=1):
            fh.write(f"{i},{float(v)!r}\n")
    return {"predictions": str(out / "predictions.csv"), "n": int(pred.size)}


def _read_column(path, name):
    header = _header(path)
    if name not in header:
        raise UsageError(f"column {name!r} missing from {path}")
    k = header.index(name)
    vals = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        for lineno, raw in enumerate(reader, start=1):
            if not raw:
                continue
            try:
                vals.append(float(raw[k]))
            except (ValueError, IndexError):
                raise UsageError(f"{path}: row {lineno}: non-numeric {name!r}") from None
    return np.array(vals)


def cmd_evaluate(o):
    y = _read_column(o["truth"], o["response_col"])
    p = _read_column(o["predictions"], "prediction")
    rep = metrics(y, p, pointwise_re=o["pointwise_re"])
    out = _outdir(o)
    _write_json(out / "metrics.json", rep.to_dict())
    return rep.to_dict()


def cmd_tune(o):
    ds = load_dataset(o)
    cfg = fit_config(o)
    sp = _split_for(ds, o)
    design = space_filling_design(o["n_runs"], (o["lambda_lo"], o["lambda_hi"]),
                                  (o["gamma_lo"], o["gamma_hi"]), o["seed"], o["n_candidates"])
    res = tune(ds, sp, cfg, design, o["workers"], o["refine"], o["seed"])
    out = _outdir(o)
    with open(out / "design.csv", "w", encoding="utf-8") as fh:
        keys = ["lambda", "gamma", "q25", "q50", "q75", "n_trees_effective", "val_rmse"]
        fh.write(",".join(keys) + "\n")
        for pt in res.points:
            row = pt.row()
            fh.write(",".join(repr(row[k]) for k in keys) + "\n")
    rec = {"lambda": res.recommended.lam, "gamma": res.recommended.gamma,
           "val_rmse": res.recommended.val_rmse,
           "leaf_count_quartiles": list(res.recommended.leaf_count_quartiles),
           "leaf_window_met": res.constrained}
    _write_json(out / "recommendation.json", rec)
    return rec


def cmd_compare(o):
    spec = sim_spec(o)
    cfg = fit_config(o)
    comp = compare(spec, o["replicates"], o["train_fraction"], cfg, o["workers"])
    out = _outdir(o)
    summary = {}
    for metric in ("mge", "re_percent", "rmse"):
        comp.to_csv(out / f"compare_{metric}.csv", metric)
        summary[metric] = {"p_values": comp.p_values(metric),
                           "median": {m: float(np.median(comp.column(m, metric)))
                                      for m in comp.methods}}
    _write_json(out / "compare_summary.json", summary)
    return {"replicates": o["replicates"], "rmse_p_values": summary["rmse"]["p_values"]}


HANDLERS = {"simulate": cmd_simulate, "fit": cmd_fit, "predict": cmd_predict,
            "evaluate": cmd_evaluate, "tune": cmd_tune, "compare": cmd_compare}


def _fail(code, kind, message):
    sys.stderr.write(json.dumps({"error": kind, "message": str(message), "exit_code": code}) + "\n")
    return code


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        opts = resolve_options(args.command, args)
        result = HANDLERS[args.command](opts)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    except NumericalError as exc:
        return _fail(EXIT_NUMERICAL, type(exc).__name__, exc)
    except (BoostSError, ValueError) as exc:
        return _fail(EXIT_USAGE, type(exc).__name__, exc)
    except FileNotFoundError as exc:
        return _fail(EXIT_USAGE, "FileNotFoundError", exc)
    except OSError as exc:
        return _fail(EXIT_IO, type(exc).__name__, exc)
    sys.stdout.write(json.dumps(result) + "\n")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
