"""Dirichlet process Gaussian mixture fitted by mean-field variational inference.

Truncated stick-breaking model with a Normal-inverse-Wishart base measure:

    v_t ~ Beta(1, alpha),           t = 1..T-1  (v_T = 1)
    (mu_t, Sigma_t) ~ NIW(m0, kappa0, nu0, Psi0)
    c_i ~ Mult(pi(v)),  w_i | c_i = t ~ N(mu_t, Sigma_t)

The variational family is q(v) q(eta) q(c) with Beta, NIW and categorical
factors. Coordinate ascent updates q(c), then q(v), then q(eta).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, solve_triangular
from scipy.special import betaln, digamma, gammaln, logsumexp, xlogy

from .errors import ArgumentError, NumericalError

logger = logging.getLogger(__name__)

_LOG_2PI = np.log(2 * np.pi)


@dataclass(frozen=True)
class DpmmConfig:
    """Hyperparameters of the DP mixture and of the inference loop.

    ``base_mean``, ``base_dof`` and ``base_scatter`` default to zero, D+2 and
    the identity for D-dimensional data (D = M+1 joint coordinates).
    """

    alpha: float = 1.0
    truncation: int = 20
    base_mean: Optional[np.ndarray] = None
    base_scale: float = 0.01
    base_dof: Optional[float] = None
    base_scatter: Optional[np.ndarray] = None
    max_iters: int = 500
    elbo_tol: float = 1e-6
    restarts: int = 5
    prune_weight: float = 0.01
    prune_min_points: int = 3
    init_blend: float = 0.9
    init_centers: Optional[int] = 5  # None uses the truncation level
    init_lloyd_iters: int = 50

    def __post_init__(self):
        if not self.alpha > 0:
            raise ArgumentError("alpha must be positive")
        if self.truncation < 2:
            raise ArgumentError("truncation must be >= 2")
        if not self.base_scale > 0:
            raise ArgumentError("base_scale must be positive")
        if self.max_iters < 1 or self.restarts < 1:
            raise ArgumentError("max_iters and restarts must be >= 1")
        if not self.elbo_tol > 0:
            raise ArgumentError("elbo_tol must be positive")
        if not 0 < self.prune_weight < 1:
            raise ArgumentError("prune_weight must lie in (0, 1)")
        if self.prune_min_points < 0:
            raise ArgumentError("prune_min_points must be non-negative")
        if not 0 <= self.init_blend <= 1:
            raise ArgumentError("init_blend must lie in [0, 1]")
        if self.init_centers is not None and not 1 <= self.init_centers <= self.truncation:
            raise ArgumentError("init_centers must lie in [1, truncation]")
        if self.init_lloyd_iters < 0:
            raise ArgumentError("init_lloyd_iters must be non-negative")

    def resolved(self, dim: int) -> "DpmmConfig":
        """Copy with every base-measure field filled in for ``dim``-dimensional data."""
        m0 = np.zeros(dim) if self.base_mean is None else np.asarray(self.base_mean, float)
        nu0 = dim + 2.0 if self.base_dof is None else float(self.base_dof)
        psi0 = np.eye(dim) if self.base_scatter is None else np.asarray(self.base_scatter, float)
        if m0.shape != (dim,):
            raise ArgumentError(f"base_mean must have length {dim}")
        if psi0.shape != (dim, dim):
            raise ArgumentError(f"base_scatter must be {dim} x {dim}")
        if not np.allclose(psi0, psi0.T):
            raise ArgumentError("base_scatter must be symmetric")
        if np.linalg.eigvalsh(psi0).min() <= 0:
            raise ArgumentError("base_scatter must be positive definite")
        if not nu0 > dim - 1:
            raise ArgumentError(f"base_dof must exceed {dim - 1}")
        return replace(self, base_mean=m0, base_dof=nu0, base_scatter=psi0)


@dataclass
class NiwParams:
    """T sets of Normal-inverse-Wishart parameters, stacked along axis 0."""

    mean: np.ndarray  # T x D
    kappa: np.ndarray  # T
    dof: np.ndarray  # T
    scatter: np.ndarray  # T x D x D

    def copy(self):
        return NiwParams(self.mean.copy(), self.kappa.copy(), self.dof.copy(), self.scatter.copy())


@dataclass
class VariationalState:
    gamma: np.ndarray  # (T-1) x 2 Beta parameters
    tau: NiwParams
    phi: np.ndarray  # N x T responsibilities
    elbo_trace: list = field(default_factory=list)
    converged: bool = False
    n_iters: int = 0

    @property
    def truncation(self) -> int:
        return self.phi.shape[1]


@dataclass(frozen=True)
class ClusteringResult:
    n_clusters: int
    labels: np.ndarray  # cluster ids 1..K
    responsibilities: np.ndarray  # N x K
    weights: np.ndarray  # expected mixing proportions of the survivors
    cluster_means: np.ndarray  # K x D
    cluster_covs: np.ndarray  # K x D x D
    converged: bool = True
    elbo: float = float("nan")


# --------------------------------------------------------------------------
# stick breaking
# --------------------------------------------------------------------------

def stick_breaking_weights(v) -> np.ndarray:
    """Mixing weights of a truncated stick: T-1 fractions give T weights."""
    v = np.asarray(v, dtype=float).ravel()
    if np.any(~np.isfinite(v)) or np.any(v < 0) or np.any(v > 1):
        raise ArgumentError("stick fractions must lie in [0, 1]")
    remaining = np.concatenate([[1.0], np.cumprod(1.0 - v)])
    return np.concatenate([v, [1.0]]) * remaining


def expected_weights(gamma: np.ndarray) -> np.ndarray:
    """E_q[pi_t] under independent Beta sticks (exact, by independence)."""
    ev = gamma[:, 0] / gamma.sum(axis=1)
    return stick_breaking_weights(ev)


def _expected_log_pi(gamma):
    total = digamma(gamma.sum(axis=1))
    e_log_v = digamma(gamma[:, 0]) - total
    e_log_1mv = digamma(gamma[:, 1]) - total
    tail = np.concatenate([[0.0], np.cumsum(e_log_1mv)])
    return np.concatenate([e_log_v, [0.0]]) + tail, e_log_v, e_log_1mv


def _multigammaln(a, dim):
    j = np.arange(dim)
    return 0.25 * dim * (dim - 1) * np.log(np.pi) + gammaln(a[:, None] - 0.5 * j).sum(axis=1)


def _expected_log_det_precision(tau: NiwParams, dim: int):
    """E[log |Sigma^-1|], log |Psi| and the inverse Cholesky factor of Psi, per component."""
    chol = np.linalg.cholesky(tau.scatter)
    logdet_psi = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
    d = np.arange(1, dim + 1)
    e_logdet = (
        digamma(0.5 * (tau.dof[:, None] + 1 - d[None, :])).sum(axis=1)
        + dim * np.log(2.0)
        - logdet_psi
    )
    return e_logdet, logdet_psi, np.linalg.inv(chol)


def _expected_log_lik(data, tau: NiwParams):
    """N x T matrix of E_q[log N(w_i | mu_t, Sigma_t)]."""
    dim = data.shape[1]
    e_logdet, _, chol_inv = _expected_log_det_precision(tau, dim)
    diff = data[None, :, :] - tau.mean[:, None, :]
    z = np.matmul(diff, np.swapaxes(chol_inv, 1, 2))
    maha = np.square(z).sum(axis=2).T
    return (
        -0.5 * dim * _LOG_2PI
        + 0.5 * e_logdet[None, :]
        - 0.5 * (dim / tau.kappa[None, :] + tau.dof[None, :] * maha)
    )


def _niw_kl(tau: NiwParams, cfg: DpmmConfig):
    """Sum over components of KL(q(eta_t) || G0)."""
    dim = tau.mean.shape[1]
    m0, k0, nu0, psi0 = cfg.base_mean, cfg.base_scale, cfg.base_dof, cfg.base_scatter
    e_logdet, logdet_psi, chol_inv = _expected_log_det_precision(tau, dim)
    logdet_psi0 = np.linalg.slogdet(psi0)[1]
    nu, kap = tau.dof, tau.kappa
    # tr(Psi^-1 Psi0) with Psi^-1 = L^-T L^-1
    trace = np.einsum("tij,jk,tik->t", chol_inv, psi0, chol_inv)
    z = np.einsum("tij,tj->ti", chol_inv, tau.mean - m0[None, :])
    # precision part: Wishart(Psi^-1, nu) against Wishart(Psi0^-1, nu0)
    kl_prec = (
        0.5 * (nu - nu0) * e_logdet
        - 0.5 * nu * dim
        + 0.5 * nu * trace
        + 0.5 * nu * logdet_psi
        - 0.5 * nu0 * logdet_psi0
        + 0.5 * (nu0 - nu) * dim * np.log(2.0)
        - _multigammaln(0.5 * nu, dim)
        + _multigammaln(np.array([0.5 * nu0]), dim)
    )
    # mean part, averaged over the precision
    kl_mean = 0.5 * (
        dim * k0 / kap - dim + dim * np.log(kap / k0) + k0 * nu * np.einsum("ti,ti->t", z, z)
    )
    return float(np.sum(kl_prec + kl_mean))


# --------------------------------------------------------------------------
# coordinate ascent
# --------------------------------------------------------------------------

def _update_phi(data, gamma, tau):
    e_log_pi, _, _ = _expected_log_pi(gamma)
    log_rho = _expected_log_lik(data, tau) + e_log_pi[None, :]
    log_rho -= logsumexp(log_rho, axis=1, keepdims=True)
    phi = np.exp(log_rho)
    phi /= phi.sum(axis=1, keepdims=True)
    return phi


def _update_gamma(phi, alpha):
    counts = phi.sum(axis=0)
    later = np.cumsum(counts[::-1])[::-1]
    return np.column_stack([1.0 + counts[:-1], alpha + later[1:]])


def _update_tau(data, phi, cfg: DpmmConfig) -> NiwParams:
    m0, k0, nu0, psi0 = cfg.base_mean, cfg.base_scale, cfg.base_dof, cfg.base_scatter
    counts = phi.sum(axis=0)
    safe = np.where(counts > 0, counts, 1.0)
    xbar = (phi.T @ data) / safe[:, None]
    diff = data[None, :, :] - xbar[:, None, :]
    s = np.matmul(np.swapaxes(diff * phi.T[:, :, None], 1, 2), diff)
    dm = xbar - m0[None, :]
    shrink = k0 * counts / (k0 + counts)
    scatter = psi0[None] + s + shrink[:, None, None] * np.einsum("ti,tj->tij", dm, dm)
    scatter = 0.5 * (scatter + np.swapaxes(scatter, 1, 2))
    kappa = k0 + counts
    mean = (k0 * m0[None, :] + counts[:, None] * xbar) / kappa[:, None]
    return NiwParams(mean=mean, kappa=kappa, dof=nu0 + counts, scatter=scatter)


def _check_data(data):
    data = np.asarray(data, dtype=float)
    if data.ndim != 2:
        raise ArgumentError(f"data must be an N x D matrix, got shape {data.shape}")
    if data.shape[0] < 2:
        raise ArgumentError("at least two points are needed")
    if not np.all(np.isfinite(data)):
        raise ArgumentError("data contains non-finite entries")
    return data


def elbo(state: VariationalState, data, cfg: DpmmConfig) -> float:
    """Evidence lower bound E_q[log p(W, z)] - E_q[log q(z)]."""
    data = _check_data(data)
    n, dim = data.shape
    T = state.phi.shape[1]
    if (
        state.phi.shape[0] != n
        or state.gamma.shape != (T - 1, 2)
        or state.tau.mean.shape != (T, dim)
    ):
        raise ArgumentError("variational state does not match the data dimensions")
    cfg = cfg.resolved(dim)
    if T != cfg.truncation:
        raise ArgumentError("variational state truncation differs from the configuration")
    gamma, phi, alpha = state.gamma, state.phi, cfg.alpha

    e_log_pi, e_log_v, e_log_1mv = _expected_log_pi(gamma)
    sticks = np.sum(
        np.log(alpha)
        + (alpha - 1.0) * e_log_1mv
        - (gamma[:, 0] - 1.0) * e_log_v
        - (gamma[:, 1] - 1.0) * e_log_1mv
        + betaln(gamma[:, 0], gamma[:, 1])
    )
    assign = np.sum(phi * e_log_pi[None, :]) - np.sum(xlogy(phi, phi))
    lik = np.sum(phi * _expected_log_lik(data, state.tau))
    return float(sticks + assign + lik - _niw_kl(state.tau, cfg))


def _kmeanspp_labels(data, n_centers, rng):
    n = data.shape[0]
    k = min(n_centers, n)
    centers = [int(rng.integers(n))]
    d2 = np.sum((data - data[centers[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers.append(idx)
        d2 = np.minimum(d2, np.sum((data - data[idx]) ** 2, axis=1))
    c = data[centers]
    dist = ((data[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(dist, axis=1)


def _lloyd(data, labels, k, iters, rng):
    for _ in range(iters):
        centers = np.array([
            data[labels == j].mean(axis=0) if np.any(labels == j) else data[rng.integers(len(data))]
            for j in range(k)
        ])
        new = np.argmin(((data[:, None, :] - centers[None]) ** 2).sum(axis=2), axis=1)
        if np.array_equal(new, labels):
            break
        labels = new
    return labels


def initial_state(data, cfg: DpmmConfig, rng: np.random.Generator) -> VariationalState:
    """k-means hard seeding blended with the uniform responsibility matrix."""
    n = data.shape[0]
    T = cfg.truncation
    k = T if cfg.init_centers is None else cfg.init_centers
    labels = _kmeanspp_labels(data, k, rng)
    labels = _lloyd(data, labels, min(k, n), cfg.init_lloyd_iters, rng)
    phi = np.full((n, T), (1.0 - cfg.init_blend) / T)
    phi[np.arange(n), labels] += cfg.init_blend
    return VariationalState(
        gamma=_update_gamma(phi, cfg.alpha), tau=_update_tau(data, phi, cfg), phi=phi
    )


def sweep(state: VariationalState, data, cfg: DpmmConfig) -> VariationalState:
    """One coordinate-ascent pass (q(c), then q(v), then q(eta)) on a resolved config."""
    phi = _update_phi(data, state.gamma, state.tau)
    gamma = _update_gamma(phi, cfg.alpha)
    tau = _update_tau(data, phi, cfg)
    return VariationalState(
        gamma=gamma,
        tau=tau,
        phi=phi,
        elbo_trace=list(state.elbo_trace),
        converged=state.converged,
        n_iters=state.n_iters + 1,
    )


def run_inference(data, cfg: DpmmConfig, rng: np.random.Generator) -> VariationalState:
    """Single initialization followed by sweeps until the ELBO stalls."""
    state = initial_state(data, cfg, rng)
    state.elbo_trace.append(elbo(state, data, cfg))
    for _ in range(cfg.max_iters):
        state = sweep(state, data, cfg)
        value = elbo(state, data, cfg)
        prev = state.elbo_trace[-1]
        state.elbo_trace.append(value)
        if abs(value - prev) < cfg.elbo_tol * max(1.0, abs(value)):
            state.converged = True
            break
    return state


def summarize(state: VariationalState, data, cfg: DpmmConfig) -> ClusteringResult:
    """Prune weak components and relabel the survivors 1..K by decreasing weight."""
    dim = data.shape[1]
    phi = state.phi
    T = phi.shape[1]
    weights = expected_weights(state.gamma)
    hard = np.argmax(phi, axis=1)
    counts = np.bincount(hard, minlength=T)
    keep = np.flatnonzero((weights >= cfg.prune_weight) & (counts >= cfg.prune_min_points))
    if keep.size == 0:
        keep = np.array([int(np.argmax(counts))])
    keep = keep[np.argsort(-weights[keep], kind="stable")]

    resp = phi[:, keep]
    resp = resp / resp.sum(axis=1, keepdims=True)
    labels = np.argmax(resp, axis=1) + 1

    tau = state.tau
    dof = tau.dof[keep]
    denom = np.where(dof > dim + 1, dof - dim - 1, dof)
    covs = tau.scatter[keep] / denom[:, None, None]
    return ClusteringResult(
        n_clusters=int(keep.size),
        labels=labels,
        responsibilities=resp,
        weights=weights[keep].copy(),
        cluster_means=tau.mean[keep].copy(),
        cluster_covs=covs,
        converged=state.converged,
        elbo=state.elbo_trace[-1] if state.elbo_trace else float("nan"),
    )


def fit(data, cfg: DpmmConfig = DpmmConfig(), seed: int = 0):
    """Variational DP mixture fit with restarts; returns (best state, clustering).

    The restart with the highest final ELBO wins. Non-convergence within
    ``max_iters`` is reported through ``converged`` rather than raised.
    """
    data = _check_data(data)
    cfg = cfg.resolved(data.shape[1])
    seeds = np.random.SeedSequence(seed).spawn(cfg.restarts)
    best = None
    for ss in seeds:
        state = run_inference(data, cfg, np.random.default_rng(ss))
        if best is None or state.elbo_trace[-1] > best.elbo_trace[-1]:
            best = state
    if not best.converged:
        logger.warning("DPMM did not converge within %d sweeps", cfg.max_iters)
    return best, summarize(best, data, cfg)


def predict_responsibility(result: ClusteringResult, w) -> np.ndarray:
    """Membership probabilities of a new joint point under the fitted Gaussians."""
    w = np.asarray(w, dtype=float).ravel()
    if not np.all(np.isfinite(w)):
        raise ArgumentError("w must be finite")
    K = result.n_clusters
    if w.size != result.cluster_means.shape[1]:
        raise ArgumentError("w has the wrong dimension")
    logp = np.empty(K)
    for k in range(K):
        try:
            c, low = cho_factor(result.cluster_covs[k], lower=True)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"covariance of cluster {k + 1} is singular", cluster=k + 1) from exc
        diff = w - result.cluster_means[k]
        z = solve_triangular(c, diff, lower=True)
        logdet = 2.0 * np.log(np.diag(c)).sum()
        logp[k] = np.log(result.weights[k]) - 0.5 * (w.size * _LOG_2PI + logdet + z @ z)
    return np.exp(logp - logsumexp(logp))
