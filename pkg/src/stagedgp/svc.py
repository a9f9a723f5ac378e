"""Support vector classification: binary SMO training, leave-one-out tuning,
Platt calibration and one-vs-one multi-class prediction with coupled posteriors.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from itertools import combinations
from typing import Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from . import _smo
from .errors import ArgumentError, NumericalError
from .optim import OptimConfig, minimize

logger = logging.getLogger(__name__)

CONVENTIONS = ("printed", "standard")
PROB_CLAMP = 1e-7

# number of coupling solves that needed more than 100 iterations
slow_coupling_count = 0


@dataclass(frozen=True)
class KernelParams:
    """Gaussian kernel lengthscales.

    With ``convention="printed"`` the squared lengthscale divides the
    coordinate difference, exp(-0.5 ((a - b) / theta^2)^2); with
    ``"standard"`` it is exp(-0.5 ((a - b) / theta)^2).
    """

    lengthscales: np.ndarray
    convention: str = "printed"

    def __post_init__(self):
        theta = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        if theta.ndim != 1 or theta.size < 1:
            raise ArgumentError("lengthscales must be a non-empty vector")
        if not np.all(np.isfinite(theta)) or np.any(theta <= 0):
            raise ArgumentError("lengthscales must be positive and finite")
        if self.convention not in CONVENTIONS:
            raise ArgumentError(f"convention must be one of {CONVENTIONS}")
        object.__setattr__(self, "lengthscales", theta)

    @property
    def effective(self) -> np.ndarray:
        return self.lengthscales**2 if self.convention == "printed" else self.lengthscales

    def for_dim(self, m: int) -> np.ndarray:
        ell = self.effective
        if ell.size == 1:
            return np.full(m, ell[0])
        if ell.size != m:
            raise ArgumentError(f"kernel has {ell.size} lengthscales but inputs have {m} columns")
        return ell


def gram(A, B, params: KernelParams) -> np.ndarray:
    """Gaussian kernel matrix between the rows of ``A`` and ``B``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    ell = params.for_dim(A.shape[1])
    return np.exp(-0.5 * cdist(A / ell, B / ell, "sqeuclidean"))


def gaussian_kernel(a, b, params: KernelParams) -> float:
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ArgumentError("kernel inputs must be finite")
    ell = params.for_dim(a.size)
    return float(np.exp(-0.5 * np.sum(((a - b) / ell) ** 2)))


# --------------------------------------------------------------------------
# binary classifier
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class BinarySvcModel:
    support_inputs: np.ndarray
    support_coeffs: np.ndarray  # alpha_i * label_i
    bias: float
    penalty: float
    kernel: KernelParams
    labels: tuple = (1, -1)  # (positive class id, negative class id)
    n_iter: int = 0
    kkt_gap: float = 0.0


@dataclass
class DualSolution:
    alpha: np.ndarray
    bias: float
    n_iter: int
    kkt_gap: float


def _check_binary(X, labels):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(labels, dtype=float).ravel()
    if X.shape[0] != y.size:
        raise ArgumentError("X and labels have different lengths")
    if y.size < 2:
        raise ArgumentError("at least two training points are needed")
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise ArgumentError("labels must be -1 or +1")
    if not (np.any(y > 0) and np.any(y < 0)):
        raise ArgumentError("both classes must be present")
    if not np.all(np.isfinite(X)):
        raise ArgumentError("X contains non-finite entries")
    return X, y


def default_max_iter(n: int) -> int:
    return max(10_000_000, 100 * n)


def solve_dual(K, y, C: float, tol: float = 1e-6, max_iter: Optional[int] = None) -> DualSolution:
    """SMO on a precomputed Gram matrix. Raises NumericalError at the iteration cap."""
    if not C > 0:
        raise ArgumentError("penalty C must be positive")
    K = np.ascontiguousarray(K, dtype=float)
    y = np.ascontiguousarray(y, dtype=float)
    n = y.size
    max_iter = default_max_iter(n) if max_iter is None else max_iter
    alpha = np.zeros(n)
    grad = -np.ones(n)
    active = np.ones(n, dtype=np.bool_)
    it, gap = _smo.solve(K, y, float(C), alpha, grad, active, float(tol), int(max_iter))
    if it >= max_iter and gap >= tol:
        raise NumericalError(
            f"SMO did not reach KKT tolerance {tol} in {max_iter} iterations",
            iterations=it,
            kkt_gap=gap,
            penalty=C,
        )
    r = _smo.rho(y, float(C), alpha, grad, active)
    return DualSolution(alpha=alpha, bias=-r, n_iter=int(it), kkt_gap=float(gap))


def train_binary(
    X,
    labels,
    C: float,
    params: KernelParams,
    tol: float = 1e-6,
    max_iter: Optional[int] = None,
    classes: tuple = (1, -1),
) -> BinarySvcModel:
    """Soft-margin SVC with box constraints 0 <= alpha_i <= C."""
    X, y = _check_binary(X, labels)
    sol = solve_dual(gram(X, X, params), y, C, tol, max_iter)
    sv = sol.alpha > 1e-8
    return BinarySvcModel(
        support_inputs=X[sv].copy(),
        support_coeffs=(sol.alpha * y)[sv],
        bias=sol.bias,
        penalty=float(C),
        kernel=params,
        labels=tuple(classes),
        n_iter=sol.n_iter,
        kkt_gap=sol.kkt_gap,
    )


def decision_values(model: BinarySvcModel, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if not np.all(np.isfinite(X)):
        raise ArgumentError("inputs must be finite")
    if model.support_inputs.shape[0] == 0:
        return np.full(X.shape[0], model.bias)
    return gram(X, model.support_inputs, model.kernel) @ model.support_coeffs + model.bias


def decision(model: BinarySvcModel, x) -> float:
    x = np.asarray(x, dtype=float).ravel()
    return float(decision_values(model, x[None, :])[0])


def dual_objective(K, y, alpha) -> float:
    """0.5 a'Qa - sum(a) with Q_ij = y_i y_j K_ij."""
    ay = alpha * y
    return float(0.5 * ay @ K @ ay - alpha.sum())


def kkt_gap(K, y, C, alpha) -> float:
    """Maximal violating-pair gap m(a) - M(a); zero or negative at an exact optimum."""
    grad = (K * np.outer(y, y)) @ alpha - 1.0
    v = -y * grad
    up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
    low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < C))
    if not up.any() or not low.any():
        return 0.0
    return float(v[up].max() - v[low].min())


# --------------------------------------------------------------------------
# hyperparameter tuning
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SvcTuning:
    """Search box (log10 units) and budget for leave-one-out tuning."""

    log10_c: tuple = (-2.0, 4.0)
    log10_theta: tuple = (-2.0, 2.0)
    budget: int = 60
    isotropic: bool = True
    convention: str = "printed"
    tol: float = 1e-6
    loo_tol: float = 1e-3  # KKT tolerance of the leave-one-out retrainings


def loo_error_count(X, y, C: float, params: KernelParams, tol: float = 1e-6, loo_tol: float = 1e-3) -> int:
    """Leave-one-out misclassification count, retraining without each support vector."""
    X, y = _check_binary(X, y)
    K = np.ascontiguousarray(gram(X, X, params))
    sol = solve_dual(K, y, C, tol)
    errors, _ = _smo.loo_errors(K, y, float(C), sol.alpha, float(loo_tol), default_max_iter(y.size))
    return int(errors)


def tune_hyperparameters(
    X,
    labels,
    tuning: SvcTuning = SvcTuning(),
    seed: int = 0,
) -> tuple:
    """Minimize the leave-one-out error over (log10 C, log10 theta) with CMA-ES.

    Among equally good points the one with fewer training errors wins, then
    the larger lengthscale (smoother boundary), then the smaller penalty.
    """
    X, y = _check_binary(X, labels)
    n, m = X.shape
    n_theta = 1 if tuning.isotropic else m
    lower = np.array([tuning.log10_c[0]] + [tuning.log10_theta[0]] * n_theta)
    upper = np.array([tuning.log10_c[1]] + [tuning.log10_theta[1]] * n_theta)
    cfg = OptimConfig(lower, upper, max_evals=tuning.budget, seed=seed, tol_fun=-1.0)

    records = []

    def objective(z):
        C = 10.0 ** z[0]
        params = KernelParams(10.0 ** z[1:], tuning.convention)
        K = np.ascontiguousarray(gram(X, X, params))
        try:
            sol = solve_dual(K, y, C, tuning.tol)
            errors, failures = _smo.loo_errors(
                K, y, float(C), sol.alpha, float(tuning.loo_tol), default_max_iter(n)
            )
        except NumericalError:
            errors, failures, sol = n, 1, None
        if failures:
            errors = n
            train_errors = n
        else:
            f = K @ (sol.alpha * y) + sol.bias
            train_errors = int(np.sum(y * f <= 0))
        records.append((int(errors), train_errors, -float(np.mean(z[1:])), float(z[0]), tuple(z)))
        return float(errors)

    minimize(objective, cfg)
    best = min(records)
    z = np.array(best[4])
    return 10.0 ** z[0], KernelParams(10.0 ** z[1:], tuning.convention)


# --------------------------------------------------------------------------
# Platt scaling
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PlattCalibration:
    """P(positive | f) = 1 / (1 + exp(slope * f + intercept))."""

    slope: float
    intercept: float

    def probability(self, f):
        z = self.slope * np.asarray(f, dtype=float) + self.intercept
        # stable logistic for either sign of z
        out = np.where(z >= 0, np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))),
                       1.0 / (1.0 + np.exp(-np.abs(z))))
        return float(out) if out.ndim == 0 else out


def fit_platt(decisions, labels, max_iter: int = 100, min_step: float = 1e-10) -> PlattCalibration:
    """Regularized maximum-likelihood sigmoid fit (Newton with backtracking).

    Targets are smoothed to (N+ + 1)/(N+ + 2) and 1/(N- + 2), and the loss is
    evaluated in a form that cannot overflow.
    """
    f = np.asarray(decisions, dtype=float).ravel()
    y = np.asarray(labels, dtype=float).ravel()
    if f.size != y.size:
        raise ArgumentError("decisions and labels have different lengths")
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise ArgumentError("labels must be -1 or +1")
    n_pos = int(np.sum(y > 0))
    n_neg = int(np.sum(y < 0))
    if n_pos == 0 or n_neg == 0:
        raise ArgumentError("both classes must be present")
    hi = (n_pos + 1.0) / (n_pos + 2.0)
    lo = 1.0 / (n_neg + 2.0)
    t = np.where(y > 0, hi, lo)

    def objective(A, B):
        z = f * A + B
        return float(np.sum(np.where(z >= 0, t * z + np.log1p(np.exp(-z)),
                                     (t - 1.0) * z + np.log1p(np.exp(z)))))

    A = 0.0
    B = np.log((n_neg + 1.0) / (n_pos + 1.0))
    fval = objective(A, B)
    for _ in range(max_iter):
        z = f * A + B
        ez = np.exp(-np.abs(z))
        p = np.where(z >= 0, ez / (1.0 + ez), 1.0 / (1.0 + ez))
        q = 1.0 - p
        d2 = p * q
        h11 = 1e-12 + np.sum(f * f * d2)
        h22 = 1e-12 + np.sum(d2)
        h21 = np.sum(f * d2)
        d1 = t - p
        g1 = np.sum(f * d1)
        g2 = np.sum(d1)
        if abs(g1) < 1e-5 and abs(g2) < 1e-5:
            return PlattCalibration(float(A), float(B))
        det = h11 * h22 - h21 * h21
        dA = -(h22 * g1 - h21 * g2) / det
        dB = -(-h21 * g1 + h11 * g2) / det
        gd = g1 * dA + g2 * dB
        step = 1.0
        while step >= min_step:
            nA, nB = A + step * dA, B + step * dB
            nf = objective(nA, nB)
            if nf < fval + 1e-4 * step * gd:
                A, B, fval = nA, nB, nf
                break
            step /= 2.0
        else:
            # no descent possible along the Newton direction: already optimal to precision
            return PlattCalibration(float(A), float(B))
    raise NumericalError("Platt calibration did not converge", slope=A, intercept=B)


# --------------------------------------------------------------------------
# pairwise coupling
# --------------------------------------------------------------------------

def _check_pairwise(P):
    P = np.asarray(P, dtype=float)
    if P.ndim != 2 or P.shape[0] != P.shape[1] or P.shape[0] < 2:
        raise ArgumentError("pairwise matrix must be K x K with K >= 2")
    K = P.shape[0]
    off = ~np.eye(K, dtype=bool)
    vals = P[off]
    if np.any(~np.isfinite(vals)) or np.any(vals <= 0) or np.any(vals >= 1):
        raise ArgumentError("pairwise probabilities must lie strictly inside (0, 1)")
    if not np.allclose((P + P.T)[off], 1.0, atol=1e-12):
        raise ArgumentError("pairwise probabilities must satisfy p_ji = 1 - p_ij")
    return P


def transition_matrix(P) -> np.ndarray:
    """Column-stochastic matrix T whose fixed point p = T p is the coupled posterior."""
    P = np.asarray(P, dtype=float)
    K = P.shape[-1]
    off = ~np.eye(K, dtype=bool)
    T = np.where(off, P, 0.0) / (K - 1)
    idx = np.arange(K)
    T[..., idx, idx] = np.where(off, P, 0.0).sum(axis=-1) / (K - 1)
    return T


def _couple_batch(P, tol, max_iters):
    """Fixed-point iteration on a stack of pairwise matrices, shape (n, K, K)."""
    n, K, _ = P.shape
    off = ~np.eye(K, dtype=bool)
    Poff = np.where(off, P, 0.0)
    p = Poff.sum(axis=2) * (2.0 / (K * (K - 1)))
    p /= p.sum(axis=1, keepdims=True)
    iters = np.full(n, max_iters)
    done = np.zeros(n, dtype=bool)
    row_sum = Poff.sum(axis=2)
    for it in range(1, max_iters + 1):
        new = (row_sum * p + np.einsum("nij,nj->ni", Poff, p)) / (K - 1)
        new /= new.sum(axis=1, keepdims=True)
        delta = np.abs(new - p).max(axis=1)
        p = new
        just = (~done) & (delta < tol)
        iters[just] = it
        done |= just
        if done.all():
            break
    return p, iters


def coupled_posteriors(pairwise, tol: float = 1e-10, max_iters: int = 1000, return_iters=False):
    """Multi-class posteriors from pairwise ones via the stationary-vector iteration.

    Starts from the averaged pairwise estimate and iterates
    p_i <- sum_{j != i} p_ij (p_i + p_j) / (K - 1), renormalizing each step.
    """
    global slow_coupling_count
    P = _check_pairwise(pairwise)
    p, iters = _couple_batch(P[None], tol, max_iters)
    if iters[0] >= 100:
        slow_coupling_count += 1
        logger.warning("pairwise coupling needed %d iterations", iters[0])
    return (p[0], int(iters[0])) if return_iters else p[0]


# --------------------------------------------------------------------------
# one-vs-one multi-class
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PairClassifier:
    first: int  # positive class id
    second: int  # negative class id
    model: BinarySvcModel
    platt: PlattCalibration


@dataclass(frozen=True)
class MulticlassSvc:
    classes: tuple
    pairs: tuple
    coupling_max_iters: int = 1000
    coupling_tol: float = 1e-10

    def __post_init__(self):
        K = len(self.classes)
        if K < 2:
            raise ArgumentError("a multi-class SVC needs at least two classes")
        if len(self.pairs) != K * (K - 1) // 2:
            raise ArgumentError(f"expected {K * (K - 1) // 2} pair classifiers, got {len(self.pairs)}")

    @property
    def n_classes(self) -> int:
        return len(self.classes)


def train_multiclass(
    X,
    labels,
    tuning: SvcTuning = SvcTuning(),
    seed: int = 0,
    coupling_max_iters: int = 1000,
    coupling_tol: float = 1e-10,
) -> MulticlassSvc:
    """One binary classifier per class pair, each tuned, trained and calibrated."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    labels = np.asarray(labels).ravel()
    classes = tuple(int(c) for c in np.unique(labels))
    pairs = []
    for k, (a, b) in enumerate(combinations(classes, 2)):
        mask = (labels == a) | (labels == b)
        Xs = X[mask]
        ys = np.where(labels[mask] == a, 1.0, -1.0)
        C, params = tune_hyperparameters(Xs, ys, tuning, seed=seed + k)
        model = train_binary(Xs, ys, C, params, tol=tuning.tol, classes=(a, b))
        platt = fit_platt(decision_values(model, Xs), ys)
        pairs.append(PairClassifier(a, b, model, platt))
    return MulticlassSvc(classes, tuple(pairs), coupling_max_iters, coupling_tol)


def _pair_decisions(msvc: MulticlassSvc, X):
    return np.column_stack([decision_values(pc.model, X) for pc in msvc.pairs])


def _pairwise_from_decisions(msvc: MulticlassSvc, D):
    n = D.shape[0]
    K = msvc.n_classes
    index = {c: i for i, c in enumerate(msvc.classes)}
    P = np.full((n, K, K), 0.5)
    for col, pc in enumerate(msvc.pairs):
        i, j = index[pc.first], index[pc.second]
        pij = np.clip(pc.platt.probability(D[:, col]), PROB_CLAMP, 1.0 - PROB_CLAMP)
        P[:, i, j] = pij
        P[:, j, i] = 1.0 - pij
    return P


def _probs_from_decisions(msvc, D):
    global slow_coupling_count
    P = _pairwise_from_decisions(msvc, D)
    p, iters = _couple_batch(P, msvc.coupling_tol, msvc.coupling_max_iters)
    slow = int(np.sum(iters >= 100))
    if slow:
        slow_coupling_count += slow
        logger.warning("pairwise coupling needed >= 100 iterations for %d points", slow)
    return p


def class_probabilities(msvc: MulticlassSvc, X) -> np.ndarray:
    """n x K coupled posteriors, columns ordered as ``msvc.classes``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return _probs_from_decisions(msvc, _pair_decisions(msvc, X))


def predict_labels(msvc: MulticlassSvc, X, return_probs: bool = False):
    """One-vs-one voting.

    A tie between two classes goes to the verdict of their own pair
    classifier; a tie among three or more goes to the largest coupled
    posterior among the tied classes.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    D = _pair_decisions(msvc, X)
    n, K = X.shape[0], msvc.n_classes
    index = {c: i for i, c in enumerate(msvc.classes)}
    votes = np.zeros((n, K), dtype=int)
    verdict = {}
    for col, pc in enumerate(msvc.pairs):
        i, j = index[pc.first], index[pc.second]
        win_i = D[:, col] > 0
        votes[:, i] += win_i
        votes[:, j] += ~win_i
        verdict[(i, j)] = np.where(win_i, i, j)
        verdict[(j, i)] = verdict[(i, j)]
    top = votes.max(axis=1)
    tied = votes == top[:, None]
    n_tied = tied.sum(axis=1)
    winner = np.argmax(votes, axis=1)
    probs = None
    if return_probs or np.any(n_tied >= 3):
        probs = _probs_from_decisions(msvc, D)
    for r in np.flatnonzero(n_tied == 2):
        a, b = np.flatnonzero(tied[r])
        winner[r] = verdict[(a, b)][r]
    for r in np.flatnonzero(n_tied >= 3):
        cand = np.flatnonzero(tied[r])
        winner[r] = cand[np.argmax(probs[r, cand])]
    labels = np.asarray(msvc.classes)[winner]
    if return_probs:
        return labels, probs
    return labels


def predict_label(msvc: MulticlassSvc, x) -> int:
    x = np.asarray(x, dtype=float).ravel()
    return int(predict_labels(msvc, x[None, :])[0])


def predict_class_probs(msvc: MulticlassSvc, x) -> np.ndarray:
    x = np.asarray(x, dtype=float).ravel()
    return class_probabilities(msvc, x[None, :])[0]
