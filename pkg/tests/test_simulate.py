import numpy as np
import pytest
from scipy.spatial.distance import pdist

from boosts.covariance import CovarianceParams, build_covariance
from boosts.errors import ValidationError
from boosts.simulate import (
    Layout,
    MeanFn,
    SimSpec,
    custom_mean,
    friedman,
    make_locations,
    simulate,
)


def test_zero_variance_disallowed():
    with pytest.raises(ValidationError):
        SimSpec(10, CovarianceParams(0.0, 0.0, 1.0))


def test_vanishing_noise_returns_mean():
    ds, mu = simulate(SimSpec(50, CovarianceParams(1e-12, 0.0, 1.0), seed=3))
    assert np.max(np.abs(ds.response - mu)) < 1e-5


def test_same_seed_identical():
    spec = SimSpec(80, CovarianceParams(0.05, 1.0, 1.5), seed=9)
    a, _ = simulate(spec)
    b, _ = simulate(spec)
    for x, y in ((a.locations, b.locations), (a.features, b.features), (a.response, b.response)):
        assert x.tobytes() == y.tobytes()


def test_grid_nine_points():
    loc = make_locations(Layout.GRID, 9, 2)
    expect = np.array([[a, b] for a in (0, 5, 10) for b in (0, 5, 10)], dtype=float)
    np.testing.assert_array_equal(loc, expect)


def test_grid_trims_to_n():
    loc = make_locations(Layout.GRID, 300, 2)
    assert loc.shape == (300, 2)
    assert np.all(pdist(loc) > 0)


def test_uniform_deterministic_and_distinct():
    a = make_locations(Layout.UNIFORM, 200, 3, seed=4)
    b = make_locations(Layout.UNIFORM, 200, 3, seed=4)
    assert np.array_equal(a, b)
    assert np.all(pdist(a) > 0)
    assert a.min() >= 0 and a.max() <= 10


def test_friedman_truncation():
    X = np.array([[0.5, 0.5, 0.5, 1.0, 1.0]])
    full = 10 * np.sin(np.pi * 0.25) + 0 + 10 + 5
    assert friedman(X)[0] == pytest.approx(full, rel=1e-14)
    assert friedman(X[:, :3])[0] == pytest.approx(10 * np.sin(np.pi * 0.25), rel=1e-14)


def test_custom_expression():
    X = np.array([[1.0, 2.0], [3.0, 4.0]])
    S = np.zeros((2, 2))
    np.testing.assert_allclose(custom_mean("x1 * x2 + sin(s1)", X, S), [2.0, 12.0])
    with pytest.raises(ValidationError):
        custom_mean("__import__('os')", X, S)


def test_monte_carlo_covariance():
    cov = CovarianceParams(0.05, 1.0, 1.5)
    loc = make_locations(Layout.GRID, 100, 2)
    sigma = build_covariance(cov, loc)
    reps = 2000
    draws = np.stack([simulate(SimSpec(100, cov, layout=Layout.GRID, mean_fn=MeanFn.ZERO,
                                       seed=s))[0].response for s in range(reps)])
    emp = np.cov(draws, rowvar=False, bias=True)
    mask = np.abs(sigma) > 0.05 * cov.sill
    rel = np.abs(emp[mask] - sigma[mask]) / np.abs(sigma[mask])
    assert np.median(rel) < 0.10
    diag = np.abs(np.diag(emp) - np.diag(sigma)) / np.diag(sigma)
    assert diag.max() < 0.10
    # per-entry sampling error of a Gaussian covariance estimate
    se = np.sqrt((np.outer(np.diag(sigma), np.diag(sigma)) + sigma ** 2) / reps)
    assert np.max(np.abs(emp - sigma) / se) < 5.0
