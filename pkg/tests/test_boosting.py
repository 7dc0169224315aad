import json
from dataclasses import replace

import numpy as np
import pytest

from boosts import boosting
from boosts.boosting import Ensemble, FitConfig, fit, n_trees_effective, predict
from boosts.covariance import CovarianceParams, covariance_factor
from boosts.data import SpatialDataset, split
from boosts.errors import ModelFormatError, UnsupportedVersionError, ValidationError
from boosts.simulate import SimSpec, simulate
from boosts.tree import REL_TOL, GrowConfig
from oracles import diagonal_boost


def _small_ds(seed=0, n=120, m=3):
    spec = SimSpec(n, CovarianceParams(0.05, 1.0, 1.5), m=m, seed=seed)
    return simulate(spec)[0]


def test_zero_target_early_stops():
    rng = np.random.default_rng(0)
    ds = SpatialDataset(rng.uniform(0, 10, (40, 2)), rng.uniform(size=(40, 2)), np.zeros(40))
    cfg = FitConfig(n_trees=20, fixed_covariance=CovarianceParams.identity())
    ens = fit(ds, None, cfg)
    assert len(ens.trees) == 3
    assert all(t.n_leaves == 1 and t.leaf_weights[0] == 0 for t in ens.trees)
    assert not predict(ens, rng.uniform(size=(10, 2))).any()


def test_saturated_single_tree_interpolates():
    rng = np.random.default_rng(1)
    n = 25
    ds = SpatialDataset(rng.uniform(0, 10, (n, 2)), rng.uniform(size=(n, 1)),
                        rng.standard_normal(n))
    cfg = FitConfig(n_trees=1, grow=GrowConfig(0.0, 0.0, max_leaves=n, min_leaf_size=1),
                    fixed_covariance=CovarianceParams.identity())
    ens = fit(ds, None, cfg)
    np.testing.assert_allclose(predict(ens, ds.features), ds.response, atol=1e-12)


def test_objective_decreases_on_simulated_data():
    ds = _small_ds(n=300, m=5)
    ens = fit(ds, None, FitConfig(n_trees=20, grow=GrowConfig(0.05, 1.0)))
    tr = ens.objective_trace
    assert all(b <= a for a, b in zip(tr, tr[1:]))
    for k, t in enumerate(ens.trees, start=1):
        if t.n_leaves >= 2:
            assert tr[k] < tr[k - 1]
    assert tr[-1] < 0.1 * tr[0]


def test_trace_equals_loss_under_fixed_covariance():
    ds = _small_ds(seed=3)
    cfg = FitConfig(n_trees=5, grow=GrowConfig(0.05, 0.5),
                    fixed_covariance=CovarianceParams(0.05, 1.0, 1.5))
    ens = fit(ds, None, cfg)
    fac = covariance_factor(cfg.fixed_covariance, ds.locations)
    r = ds.response - predict(ens, ds.features)
    assert ens.objective_trace[-1] == pytest.approx(fac.quad(r), rel=1e-9)


def test_residual_bookkeeping():
    ds = _small_ds(seed=4)
    ens = fit(ds, None, FitConfig(n_trees=6, grow=GrowConfig(0.05, 0.5)))
    out = sum(t.leaf_weights[t.leaf_assignment] for t in ens.trees)
    np.testing.assert_allclose(out, predict(ens, ds.features), atol=1e-10)


def test_predict_is_sum_of_trees():
    ds = _small_ds(seed=5)
    ens = fit(ds, None, FitConfig(n_trees=4, grow=GrowConfig(0.05, 0.5)))
    Z = np.random.default_rng(0).uniform(size=(50, ds.m))
    total = np.zeros(50)
    for t in ens.trees:
        total += t.predict(Z)
    np.testing.assert_allclose(predict(ens, Z), total, atol=1e-12)


def test_empty_ensemble_predicts_zero():
    ens = Ensemble([], [], [0.0], FitConfig(), 3)
    assert not predict(ens, np.ones((4, 3))).any()


def test_width_mismatch():
    ds = _small_ds()
    ens = fit(ds, None, FitConfig(n_trees=1))
    with pytest.raises(ValidationError):
        predict(ens, np.ones((2, ds.m + 1)))


def test_identity_fit_is_classical_boosting():
    rng = np.random.default_rng(7)
    n = 80
    ds = SpatialDataset(rng.uniform(0, 10, (n, 2)), rng.uniform(size=(n, 3)),
                        rng.standard_normal(n) + 3 * rng.uniform(size=n))
    sigma2 = 2.0
    cfg = FitConfig(n_trees=4, grow=GrowConfig(0.1, 0.3, max_leaves=6, min_leaf_size=3),
                    fixed_covariance=CovarianceParams.identity(sigma2), early_stop_patience=0)
    ens = fit(ds, None, cfg)
    ref = diagonal_boost(ds.response, ds.features, sigma2, 4, 0.1, 0.3, 6, 3, REL_TOL)
    for t, r in zip(ens.trees, ref):
        assert _close(t.to_dict(), r)


def _close(a, b):
    if "weight" in b:
        return "weight" in a and a["leaf"] == b["leaf"] and abs(a["weight"] - b["weight"]) <= 1e-10
    return (a["feature"] == b["feature"] and a["threshold"] == b["threshold"]
            and _close(a["left"], b["left"]) and _close(a["right"], b["right"]))


def test_trees_after_stop_stay_dead():
    ds = _small_ds(seed=8)
    y = ds.response - ds.response.mean()
    ds = SpatialDataset(ds.locations, ds.features, y)
    cfg = FitConfig(n_trees=8, grow=GrowConfig(0.0, 1e9), early_stop_patience=0,
                    fixed_covariance=CovarianceParams(0.05, 1.0, 1.5))
    ens = fit(ds, None, cfg)
    assert len(ens.trees) == 8
    first = ens.trees[0].leaf_weights[0]
    for t in ens.trees[1:]:
        assert t.n_leaves == 1 and abs(t.leaf_weights[0]) <= 1e-12 * max(1.0, abs(first))


def test_save_load_roundtrip(tmp_path):
    ds = _small_ds(seed=9)
    ens = fit(ds, split(ds, 0.5, 1), FitConfig(n_trees=5, grow=GrowConfig(0.05, 0.3)))
    path = tmp_path / "m.json"
    boosting.save(ens, path)
    back = boosting.load(path)
    Z = np.random.default_rng(2).uniform(size=(100, ds.m))
    np.testing.assert_array_equal(predict(back, Z), predict(ens, Z))
    assert back.config.to_dict() == ens.config.to_dict()


def test_truncated_file(tmp_path):
    ds = _small_ds()
    path = tmp_path / "m.json"
    boosting.save(fit(ds, None, FitConfig(n_trees=2)), path)
    text = path.read_text()
    path.write_text(text[: len(text) // 2])
    with pytest.raises(ModelFormatError):
        boosting.load(path)


def test_version_mismatch(tmp_path):
    ds = _small_ds()
    obj = boosting.to_dict(fit(ds, None, FitConfig(n_trees=1)))
    obj["version"] = 99
    path = tmp_path / "m.json"
    path.write_text(json.dumps(obj))
    with pytest.raises(UnsupportedVersionError):
        boosting.load(path)


def test_deterministic_and_worker_invariant():
    ds = _small_ds(seed=11)
    cfg = FitConfig(n_trees=4, grow=GrowConfig(0.05, 0.5))
    a = boosting.to_dict(fit(ds, None, cfg))
    b = boosting.to_dict(fit(ds, None, cfg))
    c = boosting.to_dict(fit(ds, None, replace(cfg, workers=3)))
    assert json.dumps(a) == json.dumps(b)
    c["config"]["workers"] = 1
    assert json.dumps(a) == json.dumps(c)


def test_n_trees_effective():
    ds = _small_ds(seed=12)
    ens = fit(ds, None, FitConfig(n_trees=30, grow=GrowConfig(0.05, 4.25)))
    k = n_trees_effective(ens)
    assert 0 <= k <= len(ens.trees)
    assert all(t.n_leaves == 1 for t in ens.trees[k:])


def test_learning_rate_scales_first_tree():
    ds = _small_ds(seed=13)
    base = FitConfig(n_trees=1, grow=GrowConfig(0.05, 0.5),
                     fixed_covariance=CovarianceParams.identity())
    full = fit(ds, None, base)
    half = fit(ds, None, replace(base, learning_rate=0.5))
    np.testing.assert_allclose(half.trees[0].leaf_weights, 0.5 * full.trees[0].leaf_weights)


def test_config_validation():
    with pytest.raises(ValidationError):
        FitConfig(learning_rate=0.0)
    with pytest.raises(ValidationError):
        FitConfig(n_trees=0)
    with pytest.raises(ValidationError):
        FitConfig(cov_update_every=0)


def test_config_dict_roundtrip():
    cfg = FitConfig(n_trees=7, fixed_covariance=CovarianceParams(0.1, 1.0, 2.0))
    assert FitConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
