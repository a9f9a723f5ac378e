"""Kriging with a polynomial trend and maximum-likelihood lengthscales.

Ordinary (constant trend) or universal (linear trend) Kriging. The trend
coefficients and the process variance are concentrated out of the
likelihood, so only the correlation lengthscales (and optionally a nugget)
are searched, with CMA-ES in log10 space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import cholesky, solve_triangular
from scipy.spatial.distance import cdist

from . import _kernels
from .errors import ArgumentError, IdentifiabilityError, NumericalError
from .optim import OptimConfig, minimize_restarts

KERNELS = ("matern52", "gaussian")
_SQRT5 = math.sqrt(5.0)
_MAX_JITTER = 1e-4


# --------------------------------------------------------------------------
# correlation functions
# --------------------------------------------------------------------------

def _check_theta(theta, m):
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if theta.size == 1 and m > 1:
        theta = np.full(m, theta[0])
    if theta.size != m:
        raise ArgumentError(f"expected {m} lengthscales, got {theta.size}")
    if not np.all(np.isfinite(theta)) or np.any(theta <= 0):
        raise ArgumentError("lengthscales must be positive and finite")
    return theta


def matern52(a, b, theta) -> float:
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    theta = _check_theta(theta, a.size)
    h = np.abs(a - b) / theta
    return float(np.prod((1.0 + _SQRT5 * h + (5.0 / 3.0) * h**2) * np.exp(-_SQRT5 * h)))


def correlation_matrix(A, B, theta, kernel: str = "matern52") -> np.ndarray:
    """Anisotropic product correlation between the rows of A and B."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    theta = _check_theta(theta, A.shape[1])
    if kernel == "gaussian":
        return np.exp(-0.5 * cdist(A / theta, B / theta, "sqeuclidean"))
    if kernel != "matern52":
        raise ArgumentError(f"unknown kernel {kernel!r}")
    R = np.ones((A.shape[0], B.shape[0]))
    for l in range(A.shape[1]):
        h = np.abs(A[:, l, None] - B[None, :, l]) / theta[l]
        R *= (1.0 + _SQRT5 * h + (5.0 / 3.0) * h * h) * np.exp(-_SQRT5 * h)
    return R


def _sym_corr(X, theta, kernel):
    """Correlation matrix of X with itself (compiled, for likelihood loops)."""
    X = np.ascontiguousarray(X, dtype=float)
    theta = np.ascontiguousarray(theta, dtype=float)
    if kernel == "matern52":
        return _kernels.matern52_sym(X, theta)
    return _kernels.gaussian_sym(X, theta)


def categorical_correlation(l1, l2, theta_cat: float):
    """Gaussian embedding of the compound-symmetry kernel: 1 within a class,
    exp(-1 / (2 theta_cat^2)) across classes. Accepts scalars or arrays."""
    if not theta_cat > 0:
        raise ArgumentError("theta_cat must be positive")
    same = np.asarray(l1) == np.asarray(l2)
    cross = math.exp(-0.5 / theta_cat**2)
    out = np.where(same, 1.0, cross)
    return float(out) if out.ndim == 0 else out


# --------------------------------------------------------------------------
# model containers
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TrendSpec:
    degree: int = 0

    def __post_init__(self):
        if self.degree not in (0, 1):
            raise ArgumentError("trend degree must be 0 (constant) or 1 (linear)")

    def size(self, m: int) -> int:
        return 1 if self.degree == 0 else m + 1

    def basis(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        ones = np.ones((X.shape[0], 1))
        return ones if self.degree == 0 else np.hstack([ones, X])


@dataclass(frozen=True)
class GpConfig:
    """Fitting options. Lengthscale bounds are in log10 units."""

    trend: TrendSpec = TrendSpec()
    kernel: str = "matern52"
    nugget: float = 1e-8
    optimize_nugget: bool = False
    log10_theta: tuple = (-2.0, 2.0)
    log10_nugget: tuple = (-10.0, -2.0)
    theta_cat: tuple = (1e-3, 10.0)
    restarts: int = 3
    budget: int = 600
    tol_fun: float = 1e-8
    # step-size stop in unit-box coordinates; the likelihood of large, nearly
    # singular systems is too noisy for a function-value stop
    tol_x: float = 1e-4

    def __post_init__(self):
        if self.kernel not in KERNELS:
            raise ArgumentError(f"kernel must be one of {KERNELS}")
        if self.nugget < 0:
            raise ArgumentError("nugget must be non-negative")
        if not self.log10_theta[0] < self.log10_theta[1]:
            raise ArgumentError("empty lengthscale range")
        if not 0 < self.theta_cat[0] < self.theta_cat[1]:
            raise ArgumentError("theta_cat range must be positive and non-empty")
        if self.restarts < 1:
            raise ArgumentError("restarts must be >= 1")


@dataclass(frozen=True)
class GpModel:
    trend: TrendSpec
    beta_hat: np.ndarray
    sigma2_hat: float
    lengthscales: np.ndarray
    nugget: float
    training_inputs: np.ndarray
    training_outputs: np.ndarray
    chol_R: np.ndarray  # lower factor of R + nugget * I
    F: np.ndarray
    kernel: str = "matern52"
    nll: float = float("nan")
    # derived quantities kept for fast prediction
    weights: np.ndarray = field(default=None, repr=False)  # R^-1 (Y - F beta)
    chol_FRF: np.ndarray = field(default=None, repr=False)  # lower factor of F' R^-1 F

    @property
    def n_inputs(self) -> int:
        return self.training_inputs.shape[1]


@dataclass(frozen=True)
class CategoricalGpModel:
    base: GpModel  # kernel over the continuous inputs; chol_R holds the combined matrix
    theta_cat: float
    training_labels: np.ndarray

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.training_labels)


# --------------------------------------------------------------------------
# likelihood
# --------------------------------------------------------------------------

def _factor(R, nugget):
    """Cholesky of R + nugget I, escalating the nugget tenfold on failure."""
    n = R.shape[0]
    eps = nugget
    while True:
        try:
            L = cholesky(R + eps * np.eye(n), lower=True, check_finite=False)
            if np.all(np.isfinite(L)):
                return L, eps
        except np.linalg.LinAlgError:
            pass
        eps = max(eps * 10.0, 1e-12) if eps > 0 else 1e-12
        if eps > _MAX_JITTER:
            raise NumericalError(
                "correlation matrix is not positive definite even with jitter",
                max_jitter=_MAX_JITTER,
            )


def _concentrate(L, F, Y):
    """GLS trend, process variance and the pieces needed for prediction."""
    n = Y.size
    Ft = solve_triangular(L, F, lower=True, check_finite=False)
    Yt = solve_triangular(L, Y, lower=True, check_finite=False)
    FtF = Ft.T @ Ft
    try:
        G = cholesky(FtF, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise IdentifiabilityError("trend basis is rank deficient on these points") from exc
    beta = solve_triangular(G.T, solve_triangular(G, Ft.T @ Yt, lower=True), lower=False)
    resid_t = Yt - Ft @ beta
    sigma2 = float(resid_t @ resid_t) / n
    return beta, sigma2, resid_t, G


def _profile_nll(L, sigma2, n):
    if not sigma2 > 0:
        return -math.inf if sigma2 == 0 else math.inf
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
    return 0.5 * n * math.log(2.0 * math.pi * sigma2) + 0.5 * logdet + 0.5 * n


def negative_log_likelihood(theta, X, y, trend: TrendSpec = TrendSpec(), nugget: float = 1e-8,
                            kernel: str = "matern52", labels=None, theta_cat: Optional[float] = None) -> float:
    """Profile negative log-likelihood with beta and sigma^2 at their closed forms.

    Equals -log N(y; F beta_hat, sigma2_hat (R + nugget I)) exactly, constants included.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    R = correlation_matrix(X, X, theta, kernel)
    if labels is not None:
        R = R * categorical_correlation(np.asarray(labels)[:, None], np.asarray(labels)[None, :], theta_cat)
    L, _ = _factor(R, nugget)
    _, sigma2, _, _ = _concentrate(L, trend.basis(X), y)
    return _profile_nll(L, sigma2, y.size)


def _deduplicate(X, y, labels=None):
    key = X if labels is None else np.column_stack([X, labels])
    uniq, inverse = np.unique(key, axis=0, return_inverse=True)
    if uniq.shape[0] == X.shape[0]:
        return X, y, labels
    inverse = inverse.ravel()
    counts = np.bincount(inverse)
    ym = np.bincount(inverse, weights=y) / counts
    # keep first-occurrence order for reproducible matrices
    first = np.full(uniq.shape[0], X.shape[0])
    np.minimum.at(first, inverse, np.arange(X.shape[0]))
    order = np.argsort(first)
    idx = first[order]
    Xd = X[idx]
    yd = ym[order]
    ld = None if labels is None else np.asarray(labels)[idx]
    return Xd, yd, ld


def _check_xy(X, y):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != y.size:
        raise ArgumentError("X and y have different lengths")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ArgumentError("training data contain non-finite entries")
    return X, y


def assemble(X, y, theta, cfg: GpConfig = GpConfig(), nugget: Optional[float] = None,
             R: Optional[np.ndarray] = None) -> GpModel:
    """Build a GpModel at fixed hyperparameters (no optimization)."""
    X, y = _check_xy(X, y)
    theta = _check_theta(theta, X.shape[1])
    nugget = cfg.nugget if nugget is None else nugget
    if R is None:
        R = correlation_matrix(X, X, theta, cfg.kernel)
    L, used = _factor(R, nugget)
    F = cfg.trend.basis(X)
    beta, sigma2, resid_t, G = _concentrate(L, F, y)
    weights = solve_triangular(L.T, resid_t, lower=False, check_finite=False)
    return GpModel(
        trend=cfg.trend,
        beta_hat=beta,
        sigma2_hat=sigma2,
        lengthscales=theta,
        nugget=used,
        training_inputs=X,
        training_outputs=y,
        chol_R=L,
        F=F,
        kernel=cfg.kernel,
        nll=_profile_nll(L, sigma2, y.size),
        weights=weights,
        chol_FRF=G,
    )


def fit(X, y, cfg: GpConfig = GpConfig(), seed: int = 0) -> GpModel:
    """Maximum-likelihood Kriging fit.

    Duplicate input rows are merged (outputs averaged) before fitting.
    """
    X, y = _check_xy(X, y)
    X, y, _ = _deduplicate(X, y)
    n, m = X.shape
    p = cfg.trend.size(m)
    if n <= p:
        raise IdentifiabilityError(f"{n} distinct points cannot identify a trend with {p} terms")
    F = cfg.trend.basis(X)
    lo = [cfg.log10_theta[0]] * m
    hi = [cfg.log10_theta[1]] * m
    if cfg.optimize_nugget:
        lo.append(cfg.log10_nugget[0])
        hi.append(cfg.log10_nugget[1])
    def corr(theta):
        return _sym_corr(X, theta, cfg.kernel)

    def objective(z):
        theta = 10.0 ** z[:m]
        nugget = 10.0 ** z[m] if cfg.optimize_nugget else cfg.nugget
        try:
            L, _ = _factor(corr(theta), nugget)
            _, sigma2, _, _ = _concentrate(L, F, y)
        except (NumericalError, IdentifiabilityError):
            return math.inf
        return _profile_nll(L, sigma2, n)

    ocfg = OptimConfig(np.array(lo), np.array(hi), max_evals=cfg.budget, seed=seed,
                       tol_fun=cfg.tol_fun, tol_x=cfg.tol_x)
    res = minimize_restarts(objective, ocfg, cfg.restarts)
    theta = 10.0 ** res.x_best[:m]
    nugget = 10.0 ** res.x_best[m] if cfg.optimize_nugget else cfg.nugget
    return assemble(X, y, theta, cfg, nugget=nugget)


# --------------------------------------------------------------------------
# prediction
# --------------------------------------------------------------------------

def _predict_from_r(model: GpModel, r, f):
    """Mean and variance given cross-correlations r (q x n) and trend rows f (q x p)."""
    mean = f @ model.beta_hat + r @ model.weights
    v = solve_triangular(model.chol_R, r.T, lower=True, check_finite=False)
    Ft = solve_triangular(model.chol_R, model.F, lower=True, check_finite=False)
    u = Ft.T @ v - f.T
    w = solve_triangular(model.chol_FRF, u, lower=True, check_finite=False)
    var = model.sigma2_hat * (1.0 - np.sum(v * v, axis=0) + np.sum(w * w, axis=0))
    return mean, np.maximum(var, 0.0)


def predict_many(model: GpModel, X):
    """Predictive means and variances at the rows of X."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != model.n_inputs:
        raise ArgumentError(f"expected {model.n_inputs} input columns, got {X.shape[1]}")
    if not np.all(np.isfinite(X)):
        raise ArgumentError("inputs must be finite")
    r = correlation_matrix(X, model.training_inputs, model.lengthscales, model.kernel)
    return _predict_from_r(model, r, model.trend.basis(X))


def predict(model: GpModel, x):
    """(mean, variance) at a single point."""
    x = np.asarray(x, dtype=float).ravel()
    mean, var = predict_many(model, x[None, :])
    return float(mean[0]), float(var[0])


# --------------------------------------------------------------------------
# categorical variant
# --------------------------------------------------------------------------

def fit_categorical(X, labels, y, cfg: GpConfig = GpConfig(kernel="gaussian"), seed: int = 0) -> CategoricalGpModel:
    """Single GP on (x, label) with a product of continuous and categorical correlations.

    The lengthscales and theta_cat are estimated jointly by maximum likelihood.
    With a single class this reduces to ``fit`` with the same kernel and seed.
    """
    X, y = _check_xy(X, y)
    labels = np.asarray(labels).ravel()
    if labels.size != y.size:
        raise ArgumentError("labels and y have different lengths")
    classes = np.unique(labels)
    if classes.size == 1:
        base = fit(X, y, cfg, seed)
        n = base.training_inputs.shape[0]
        return CategoricalGpModel(base, float(cfg.theta_cat[1]), np.full(n, labels[0]))

    X, y, labels = _deduplicate(X, y, labels)
    n, m = X.shape
    p = cfg.trend.size(m)
    if n <= p:
        raise IdentifiabilityError(f"{n} distinct points cannot identify a trend with {p} terms")
    F = cfg.trend.basis(X)
    same = labels[:, None] == labels[None, :]
    lo = [cfg.log10_theta[0]] * m + [math.log10(cfg.theta_cat[0])]
    hi = [cfg.log10_theta[1]] * m + [math.log10(cfg.theta_cat[1])]

    def corr(theta, tcat):
        return _sym_corr(X, theta, cfg.kernel) * np.where(same, 1.0, math.exp(-0.5 / tcat**2))

    def objective(z):
        try:
            L, _ = _factor(corr(10.0 ** z[:m], 10.0 ** z[m]), cfg.nugget)
            _, sigma2, _, _ = _concentrate(L, F, y)
        except (NumericalError, IdentifiabilityError):
            return math.inf
        return _profile_nll(L, sigma2, n)

    ocfg = OptimConfig(np.array(lo), np.array(hi), max_evals=cfg.budget, seed=seed,
                       tol_fun=cfg.tol_fun, tol_x=cfg.tol_x)
    res = minimize_restarts(objective, ocfg, cfg.restarts)
    theta = 10.0 ** res.x_best[:m]
    tcat = float(10.0 ** res.x_best[m])
    return assemble_categorical(X, labels, y, theta, tcat, cfg)


def assemble_categorical(X, labels, y, theta, theta_cat, cfg: GpConfig = GpConfig(kernel="gaussian")):
    """CategoricalGpModel at fixed hyperparameters."""
    X, y = _check_xy(X, y)
    labels = np.asarray(labels).ravel()
    R = correlation_matrix(X, X, theta, cfg.kernel) * categorical_correlation(
        labels[:, None], labels[None, :], theta_cat
    )
    return CategoricalGpModel(assemble(X, y, theta, cfg, R=R), float(theta_cat), labels)


def predict_categorical_many(model: CategoricalGpModel, X, labels):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    labels = np.asarray(labels).ravel()
    if labels.size != X.shape[0]:
        raise ArgumentError("one label per row is required")
    unseen = ~np.isin(labels, model.training_labels)
    if np.any(unseen):
        raise ArgumentError(f"label {labels[unseen][0]} was not seen during training")
    base = model.base
    r = correlation_matrix(X, base.training_inputs, base.lengthscales, base.kernel)
    r = r * categorical_correlation(labels[:, None], model.training_labels[None, :], model.theta_cat)
    return _predict_from_r(base, r, base.trend.basis(X))


def predict_categorical(model: CategoricalGpModel, x, label):
    x = np.asarray(x, dtype=float).ravel()
    mean, var = predict_categorical_many(model, x[None, :], [label])
    return float(mean[0]), float(var[0])
