"""Spatial error covariance: semivariograms, parametric fits, LWMLR detrending
and feasible generalized least squares.

The covariance models are isotropic with a nugget, a partial sill and a
range parameter::

    C(0) = nugget + sill
    C(h) = sill * rho(h / range)          h > 0
    gamma(h) = nugget + sill * (1 - rho(h / range))

with ``rho(u) = exp(-u**2)`` (Gaussian) or ``exp(-u)`` (exponential).
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
import scipy.linalg
from scipy.cluster.vq import kmeans2
from scipy.optimize import minimize, nnls
from scipy.spatial.distance import cdist, pdist, squareform

from .errors import (
    DegenerateKernelError,
    NotSPDError,
    RankDeficientError,
    ValidationError,
    VariogramError,
    VariogramFitError,
)

log = logging.getLogger(__name__)

# Used only when every empirical semivariance is exactly zero.
VARIANCE_FLOOR = 1e-12


class Family(str, enum.Enum):
    GAUSSIAN = "gaussian"
    EXPONENTIAL = "exponential"


class Basis(str, enum.Enum):
    CONSTANT = "constant"
    LINEAR = "linear"


def _correlation(family, u):
    if family is Family.GAUSSIAN:
        return np.exp(-u * u)
    return np.exp(-u)


@dataclass(frozen=True)
class CovarianceParams:
    nugget: float
    sill: float
    range: float
    family: Family = Family.GAUSSIAN

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        for name in ("nugget", "sill", "range"):
            v = float(getattr(self, name))
            if not math.isfinite(v):
                raise ValidationError(f"{name} must be finite, got {v}")
            object.__setattr__(self, name, v)
        if self.nugget < 0 or self.sill < 0:
            raise ValidationError("nugget and sill must be non-negative")
        if self.range <= 0:
            raise ValidationError("range must be positive")
        if self.nugget + self.sill <= 0:
            raise ValidationError("nugget + sill must be positive")

    @classmethod
    def identity(cls, variance=1.0):
        """Pure-nugget parameters whose covariance matrix is ``variance * I``."""
        return cls(nugget=variance, sill=0.0, range=1.0)

    def correlation(self, h):
        return _correlation(self.family, np.asarray(h, dtype=float) / self.range)

    def covariance(self, h):
        """C(h); the nugget only contributes at exactly zero distance."""
        h = np.asarray(h, dtype=float)
        c = self.sill * self.correlation(h)
        return np.where(h == 0, self.nugget + self.sill, c)

    def variogram(self, h):
        h = np.asarray(h, dtype=float)
        g = self.nugget + self.sill * (1.0 - self.correlation(h))
        return np.where(h == 0, 0.0, g)

    def to_dict(self):
        return {"family": self.family.value, "nugget": self.nugget,
                "sill": self.sill, "range": self.range}

    @classmethod
    def from_dict(cls, obj):
        return cls(nugget=obj["nugget"], sill=obj["sill"], range=obj["range"],
                   family=Family(obj.get("family", "gaussian")))


# ---------------------------------------------------------------------------
# empirical semivariogram
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EmpiricalSemivariogram:
    bin_centers: np.ndarray
    semivariances: np.ndarray
    pair_counts: np.ndarray

    def __len__(self):
        return len(self.bin_centers)

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("bin_center,semivariance,pair_count\n")
            for h, g, c in zip(self.bin_centers, self.semivariances, self.pair_counts):
                fh.write(f"{float(h)!r},{float(g)!r},{int(c)}\n")


def empirical_semivariogram(residuals, locations, n_bins=15, max_dist=None):
    """Binned Matheron estimator ``sum((r_i - r_j)**2) / (2 N_b)``.

    Bins are ``n_bins`` equal-width intervals on ``[0, max_dist]``; a pair at
    exactly ``max_dist`` falls in the last bin. ``max_dist=None`` (or
    ``"auto"``) uses half the largest pairwise distance. Bins without pairs are
    dropped.
    """
    r = np.asarray(residuals, dtype=float)
    loc = np.asarray(locations, dtype=float)
    if loc.ndim == 1:
        loc = loc[:, None]
    n = r.shape[0]
    if n < 2:
        raise VariogramError(f"need at least 2 points for a semivariogram, got {n}")
    if n_bins < 1:
        raise ValidationError("n_bins must be >= 1")

    dist = pdist(loc)
    i, j = np.triu_indices(n, k=1)
    if max_dist is None or max_dist == "auto":
        max_dist = 0.5 * float(dist.max())
    max_dist = float(max_dist)
    keep = dist <= max_dist
    if max_dist <= 0 or not keep.any():
        raise VariogramError("no point pairs within max_dist")
    dist = dist[keep]
    diff = r[i[keep]] - r[j[keep]]
    sq = diff * diff

    width = max_dist / n_bins
    b = np.minimum((dist / width).astype(np.intp), n_bins - 1)
    counts = np.bincount(b, minlength=n_bins)
    sums = np.bincount(b, weights=sq, minlength=n_bins)
    nz = counts > 0
    centers = (np.arange(n_bins) + 0.5) * width
    return EmpiricalSemivariogram(
        bin_centers=centers[nz],
        semivariances=sums[nz] / (2.0 * counts[nz]),
        pair_counts=counts[nz],
    )


# ---------------------------------------------------------------------------
# parametric fit
# ---------------------------------------------------------------------------

def _model_and_grad(theta, h, family):
    nug, sill, rng = theta
    u = h / rng
    rho = _correlation(family, u)
    model = nug + sill * (1.0 - rho)
    if family is Family.GAUSSIAN:
        drho = rho * 2.0 * u * u / rng
    else:
        drho = rho * u / rng
    return model, np.stack([np.ones_like(h), 1.0 - rho, -sill * drho])


def _cressie(theta, h, g, w, family):
    model, dm = _model_and_grad(theta, h, family)
    if np.any(model <= 0):
        return np.inf, np.zeros(3)
    ratio = g / model
    res = ratio - 1.0
    f = float(np.sum(w * res * res))
    grad = (2.0 * w * res * (-ratio / model)) @ dm.T
    return f, grad


def variogram_objective(params: CovarianceParams, emp: EmpiricalSemivariogram):
    """Cressie-weighted criterion ``sum N_b (g_b / gamma(h_b) - 1)**2``."""
    f, _ = _cressie(np.array([params.nugget, params.sill, params.range]),
                    emp.bin_centers, emp.semivariances,
                    emp.pair_counts.astype(float), params.family)
    return f


def variogram_bounds(emp: EmpiricalSemivariogram):
    """Box searched by :func:`fit_variogram`, in data units."""
    s = float(np.max(emp.semivariances))
    hmax = float(np.max(emp.bin_centers))
    return {"nugget": (0.0, 10.0 * s), "sill": (0.0, 10.0 * s),
            "range": (1e-3 * hmax, 10.0 * hmax)}


N_MULTISTART = 8


def fit_variogram(emp: EmpiricalSemivariogram, family=Family.GAUSSIAN) -> CovarianceParams:
    """Fit nugget, partial sill and range by weighted least squares.

    Runs L-BFGS-B with an analytic gradient from eight fixed starting ranges,
    log-spaced over the lag span; for each starting range the nugget and sill
    starts come from non-negative least squares. A partial sill whose
    correlation has vanished before the first lag is folded into the nugget,
    since the two are indistinguishable on the data.
    """
    family = Family(family)
    if len(emp) < 3:
        raise VariogramError(f"need at least 3 non-empty bins, got {len(emp)}")
    h = np.asarray(emp.bin_centers, dtype=float)
    g = np.asarray(emp.semivariances, dtype=float)
    w = np.asarray(emp.pair_counts, dtype=float)

    s = float(g.max())
    if s == 0.0:
        return CovarianceParams(VARIANCE_FLOOR, 0.0, float(h.max()), family)
    hmax = float(h.max())
    hn, gn = h / hmax, g / s
    bounds = [(0.0, 10.0), (0.0, 10.0), (1e-3, 10.0)]

    best_f, best_theta = np.inf, None
    improved = False
    for r0 in np.logspace(math.log10(0.05), math.log10(2.0), N_MULTISTART):
        basis = np.column_stack([np.ones_like(hn), 1.0 - _correlation(family, hn / r0)])
        (nug0, sill0), _ = nnls(basis, gn)
        if nug0 + sill0 <= 0:
            nug0 = float(gn.mean())
        theta0 = np.clip([nug0, sill0, r0], [b[0] for b in bounds], [b[1] for b in bounds])
        f0, _ = _cressie(theta0, hn, gn, w, family)
        try:
            res = minimize(_cressie, theta0, args=(hn, gn, w, family), jac=True,
                           method="L-BFGS-B", bounds=bounds,
                           options={"ftol": 1e-15, "gtol": 1e-12, "maxiter": 5000})
        except (ValueError, FloatingPointError):
            continue
        if np.isfinite(res.fun) and res.fun <= f0:
            improved = True
        for f, th in ((f0, theta0), (res.fun, res.x)):
            if np.isfinite(f) and f < best_f:
                best_f, best_theta = f, np.asarray(th, dtype=float)

    if best_theta is None or not improved:
        best = None
        if best_theta is not None:
            best = CovarianceParams(best_theta[0] * s, best_theta[1] * s,
                                    best_theta[2] * hmax, family)
        raise VariogramFitError("variogram fit did not improve from any start", best)

    nug, sill, rng = best_theta[0] * s, best_theta[1] * s, best_theta[2] * hmax
    if _correlation(family, np.array([h.min() / rng]))[0] < 1e-8:
        nug, sill = nug + sill, 0.0
    if nug + sill <= 0:
        nug = VARIANCE_FLOOR
    return CovarianceParams(nug, sill, rng, family)


# ---------------------------------------------------------------------------
# matrices
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SpdFactor:
    """Lower Cholesky factor of an SPD matrix."""

    lower: np.ndarray
    logdet: float

    @property
    def n(self):
        return self.lower.shape[0]

    def solve(self, v):
        return scipy.linalg.cho_solve((self.lower, True), v, check_finite=False)

    def whiten(self, v):
        """``L^{-1} v``; ``||whiten(v)||**2`` is the quadratic form."""
        return scipy.linalg.solve_triangular(self.lower, v, lower=True, check_finite=False)

    def quad(self, v):
        z = self.whiten(np.asarray(v, dtype=float))
        return float(z @ z)

    def inverse(self):
        """Exactly symmetric inverse via LAPACK ``potri``."""
        inv, info = scipy.linalg.lapack.dpotri(self.lower, lower=1)
        if info != 0:
            raise NotSPDError(f"potri failed with info={info}")
        inv = np.tril(inv)
        return inv + np.tril(inv, -1).T

    def matrix(self):
        return self.lower @ self.lower.T


def factorize(sigma) -> SpdFactor:
    """Cholesky factorization without any regularization."""
    a = np.asarray(sigma, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValidationError(f"expected a square matrix, got shape {a.shape}")
    scale = float(np.max(np.abs(a))) if a.size else 0.0
    if np.max(np.abs(a - a.T), initial=0.0) > 1e-12 * scale:
        raise ValidationError("matrix is not symmetric")
    try:
        low = scipy.linalg.cholesky(a, lower=True, check_finite=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NotSPDError(f"matrix is not positive definite: {exc}") from None
    diag = np.diag(low)
    if np.any(diag <= 0) or not np.all(np.isfinite(diag)):
        raise NotSPDError("Cholesky factor has a non-positive diagonal")
    return SpdFactor(low, float(2.0 * np.sum(np.log(diag))))


def _assemble(params: CovarianceParams, locations):
    loc = np.asarray(locations, dtype=float)
    if loc.ndim == 1:
        loc = loc[:, None]
    n = loc.shape[0]
    if n == 1:
        return np.full((1, 1), params.nugget + params.sill)
    if params.sill == 0.0:
        return np.eye(n) * params.nugget
    sig = squareform(params.sill * params.correlation(pdist(loc)))
    np.fill_diagonal(sig, params.nugget + params.sill)
    return sig


def _factor_with_jitter(sig):
    try:
        return sig, factorize(sig)
    except NotSPDError:
        pass
    n = sig.shape[0]
    base = float(np.trace(sig)) / n
    jitter = 1e-10 * base
    while jitter <= 1e-4 * base * (1 + 1e-9):
        trial = sig.copy()
        trial[np.diag_indices(n)] += jitter
        try:
            fac = factorize(trial)
            log.debug("covariance needed diagonal jitter %.3g", jitter)
            return trial, fac
        except NotSPDError:
            jitter *= 10.0
    cond = float(np.linalg.cond(sig))
    raise NotSPDError(f"covariance not SPD after maximum jitter (condition ~ {cond:.3g})",
                      condition=cond)


def build_covariance(params: CovarianceParams, locations):
    """Dense covariance matrix, with bounded diagonal jitter if needed."""
    return _factor_with_jitter(_assemble(params, locations))[0]


def covariance_factor(params: CovarianceParams, locations) -> SpdFactor:
    return _factor_with_jitter(_assemble(params, locations))[1]


# ---------------------------------------------------------------------------
# LWMLR design
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LwmlrConfig:
    kernel_centers: np.ndarray
    kernel_scales: np.ndarray
    basis: Basis = Basis.LINEAR

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.kernel_centers, dtype=float))
        v = np.atleast_1d(np.asarray(self.kernel_scales, dtype=float))
        object.__setattr__(self, "kernel_centers", c)
        object.__setattr__(self, "kernel_scales", v)
        object.__setattr__(self, "basis", Basis(self.basis))
        if c.shape[0] < 1 or v.shape != (c.shape[0],):
            raise ValidationError("need J >= 1 centers and one scale per center")
        if not np.all(np.isfinite(c)) or not np.all(v > 0) or not np.all(np.isfinite(v)):
            raise ValidationError("kernel centers must be finite and scales positive")

    @property
    def n_kernels(self):
        return self.kernel_centers.shape[0]

    def n_columns(self, d):
        return self.n_kernels * (1 if self.basis is Basis.CONSTANT else 1 + d)

    def to_dict(self):
        return {"kernel_centers": self.kernel_centers.tolist(),
                "kernel_scales": self.kernel_scales.tolist(),
                "basis": self.basis.value}

    @classmethod
    def from_dict(cls, obj):
        return cls(np.array(obj["kernel_centers"], dtype=float),
                   np.array(obj["kernel_scales"], dtype=float), Basis(obj["basis"]))


def default_lwmlr_config(locations, n_kernels=4, basis=Basis.CONSTANT) -> LwmlrConfig:
    """k-means centers (seed 0) with the median nearest-center distance as scale.

    ``n_kernels`` is reduced when needed so that the trend stays identifiable
    (more rows than design columns).
    """
    loc = np.asarray(locations, dtype=float)
    if loc.ndim == 1:
        loc = loc[:, None]
    n, d = loc.shape
    basis = Basis(basis)
    q = 1 if basis is Basis.CONSTANT else 1 + d
    J = max(1, min(int(n_kernels), (n - 1) // q, n))
    if J == 1:
        center = loc.mean(axis=0, keepdims=True)
        spread = math.sqrt(float(np.mean(np.sum((loc - center) ** 2, axis=1))))
        return LwmlrConfig(center, np.array([spread if spread > 0 else 1.0]), basis)
    centers, _ = kmeans2(loc, J, minit="++", seed=0)
    dc = cdist(centers, centers)
    np.fill_diagonal(dc, np.inf)
    nearest = dc.min(axis=1)
    nearest = nearest[np.isfinite(nearest) & (nearest > 0)]
    scale = float(np.median(nearest)) if nearest.size else 1.0
    return LwmlrConfig(centers, np.full(J, scale), basis)


# exp() of anything below this is zero in double precision
_LOG_UNDERFLOW = math.log(np.nextafter(0.0, 1.0))


def kernel_weights(locations, cfg: LwmlrConfig):
    """Normalized Gaussian kernel weights, one column per mixture component."""
    loc = np.asarray(locations, dtype=float)
    if loc.ndim == 1:
        loc = loc[:, None]
    d = loc.shape[1]
    v = cfg.kernel_scales
    sq = cdist(loc, cfg.kernel_centers, "sqeuclidean")
    logw = -d * np.log(v)[None, :] - sq / (2.0 * v[None, :] ** 2)
    dead = np.all(logw < _LOG_UNDERFLOW, axis=1)
    if dead.any():
        row = int(np.flatnonzero(dead)[0])
        raise DegenerateKernelError(f"all kernel weights underflow at row {row}", row=row)
    logw -= logw.max(axis=1, keepdims=True)
    w = np.exp(logw)
    return w / w.sum(axis=1, keepdims=True)


def lwmlr_design(locations, cfg: LwmlrConfig):
    """Design matrix ``[diag(pi_1) X_1, ..., diag(pi_J) X_J]``."""
    loc = np.asarray(locations, dtype=float)
    if loc.ndim == 1:
        loc = loc[:, None]
    pi = kernel_weights(loc, cfg)
    if cfg.basis is Basis.CONSTANT:
        return pi.copy()
    base = np.column_stack([np.ones(loc.shape[0]), loc])
    return np.hstack([pi[:, [j]] * base for j in range(cfg.n_kernels)])


# ---------------------------------------------------------------------------
# FGLS
# ---------------------------------------------------------------------------

class FglsResult(NamedTuple):
    params: CovarianceParams
    coef: np.ndarray
    n_iter: int
    converged: bool
    variogram: EmpiricalSemivariogram


def _param_change(old: CovarianceParams, new: CovarianceParams):
    var = max(old.nugget + old.sill, new.nugget + new.sill)
    return max(abs(new.nugget - old.nugget) / var,
               abs(new.sill - old.sill) / var,
               abs(new.range - old.range) / old.range)


def gls_coefficients(design, response, factor: Optional[SpdFactor]):
    """(Generalized) least-squares coefficients; OLS when ``factor`` is None."""
    if design.shape[1] == 0:
        return np.zeros(0)
    if factor is None:
        xw, yw = design, response
    else:
        xw, yw = factor.whiten(design), factor.whiten(response)
    coef, *_ = np.linalg.lstsq(xw, yw, rcond=None)
    return coef


def fgls(response, design, locations, family=Family.GAUSSIAN, max_iter=10, tol=1e-4,
         n_bins=15, fixed_params: Optional[CovarianceParams] = None) -> FglsResult:
    """Alternate trend and covariance estimation for ``response ~ design``.

    Iteration 0 uses ordinary least squares; later iterations use GLS under
    the covariance fitted in the previous one. Stops when every parameter
    moves by less than ``tol`` (relative) or after ``max_iter`` passes. With
    ``fixed_params`` the covariance is not estimated and a single GLS solve
    under it is returned.
    """
    family = Family(family)
    r = np.asarray(response, dtype=float)
    X = np.asarray(design, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, p = X.shape
    if not np.all(np.isfinite(r)):
        raise ValidationError("response contains non-finite values")
    if p > 0:
        if n <= p:
            raise RankDeficientError(f"design has {p} columns but only {n} rows")
        rank = np.linalg.matrix_rank(X)
        if rank < p:
            raise RankDeficientError(f"design matrix has rank {rank} < {p} columns")
    if max_iter < 1:
        raise ValidationError("max_iter must be >= 1")

    if fixed_params is not None:
        factor = covariance_factor(fixed_params, locations)
        coef = gls_coefficients(X, r, factor)
        emp = empirical_semivariogram(r - X @ coef if p else r, locations, n_bins)
        return FglsResult(fixed_params, coef, 1, True, emp)

    coef = gls_coefficients(X, r, None)
    e = r - X @ coef if p else r
    emp = empirical_semivariogram(e, locations, n_bins)
    params = fit_variogram(emp, family)
    converged = p == 0
    it = 1
    while it < max_iter and not converged:
        factor = covariance_factor(params, locations)
        coef = gls_coefficients(X, r, factor)
        e = r - X @ coef
        emp = empirical_semivariogram(e, locations, n_bins)
        new = fit_variogram(emp, family)
        it += 1
        converged = _param_change(params, new) < tol
        params = new
    return FglsResult(params, coef, it, converged, emp)


def fgls_estimate(residuals, locations, cfg: Optional[LwmlrConfig] = None,
                  family=Family.GAUSSIAN, max_iter=10, tol=1e-4, n_bins=15,
                  detrend=True) -> FglsResult:
    """Residual covariance after removing an LWMLR spatial trend.

    The returned ``coef`` are the LWMLR trend coefficients; the trend itself
    is discarded by callers, only ``params`` describe the residual process.
    ``detrend=False`` fits the variogram of the raw residuals instead.
    """
    loc = np.asarray(locations, dtype=float)
    if loc.ndim == 1:
        loc = loc[:, None]
    if not detrend:
        design = np.empty((loc.shape[0], 0))
    else:
        if cfg is None:
            cfg = default_lwmlr_config(loc)
        design = lwmlr_design(loc, cfg)
    return fgls(residuals, design, loc, family, max_iter, tol, n_bins)
