"""Bounded derivative-free minimization with CMA-ES.

The search runs in the unit hypercube obtained by rescaling the box; samples
leaving the cube are folded back by coordinate-wise reflection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ArgumentError


def default_population(dim: int) -> int:
    return 4 + int(math.floor(3 * math.log(dim)))


@dataclass
class OptimConfig:
    lower: np.ndarray
    upper: np.ndarray
    max_evals: int = 1000
    seed: int = 0
    population: Optional[int] = None
    tol_fun: float = 1e-12
    tol_x: float = 1e-11
    sigma0: float = 0.3
    x0: Optional[np.ndarray] = None

    def __post_init__(self):
        self.lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
        self.upper = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if self.lower.shape != self.upper.shape or self.lower.ndim != 1:
            raise ArgumentError("lower and upper must be vectors of equal length")
        if not np.all(self.lower < self.upper):
            raise ArgumentError("box requires lower < upper component-wise")
        if self.population is None:
            self.population = default_population(self.dim)
        if self.population < 2:
            raise ArgumentError("population must be at least 2")
        if self.max_evals < self.population:
            raise ArgumentError(
                f"budget {self.max_evals} is smaller than the population {self.population}"
            )
        if not 0 < self.sigma0:
            raise ArgumentError("sigma0 must be positive")
        if self.x0 is not None:
            self.x0 = np.clip(np.asarray(self.x0, dtype=float), self.lower, self.upper)

    @property
    def dim(self) -> int:
        return self.lower.size


@dataclass
class OptimResult:
    x_best: np.ndarray
    f_best: float
    evals: int
    generations: int = 0
    # best-so-far value after each generation
    best_trace: list = field(default_factory=list)
    stop_reason: str = ""


def reflect_unit(u: np.ndarray) -> np.ndarray:
    """Fold arbitrary reals into [0, 1] by mirror reflection at the faces."""
    v = np.mod(u, 2.0)
    v = np.where(v > 1.0, 2.0 - v, v)
    return np.clip(v, 0.0, 1.0)


def minimize(objective: Callable[[np.ndarray], float], cfg: OptimConfig) -> OptimResult:
    """(mu/mu_w, lambda)-CMA-ES with rank-one and rank-mu covariance updates.

    Non-finite objective values are treated as +inf. The best point ever
    evaluated is returned; exhausting the budget is a normal stop.
    """
    d = cfg.dim
    lam = cfg.population
    mu = lam // 2
    w = np.log(mu + 0.5) - np.log(np.arange(1, mu + 1))
    w /= w.sum()
    mueff = 1.0 / np.sum(w**2)

    cc = (4 + mueff / d) / (d + 4 + 2 * mueff / d)
    cs = (mueff + 2) / (d + mueff + 5)
    c1 = 2 / ((d + 1.3) ** 2 + mueff)
    cmu = min(1 - c1, 2 * (mueff - 2 + 1 / mueff) / ((d + 2) ** 2 + mueff))
    damps = 1 + 2 * max(0.0, math.sqrt((mueff - 1) / (d + 1)) - 1) + cs
    chi_n = math.sqrt(d) * (1 - 1 / (4 * d) + 1 / (21 * d * d))

    lo, width = cfg.lower, cfg.upper - cfg.lower
    rng = np.random.default_rng(cfg.seed)
    mean = 0.5 * np.ones(d) if cfg.x0 is None else (cfg.x0 - lo) / width
    sigma = cfg.sigma0
    C = np.eye(d)
    B = np.eye(d)
    D = np.ones(d)
    pc = np.zeros(d)
    ps = np.zeros(d)

    def evaluate(u):
        x = lo + u * width
        try:
            f = float(objective(x))
        except FloatingPointError:
            f = math.inf
        return f if math.isfinite(f) else math.inf

    x_best = None
    f_best = math.inf
    evals = 0
    trace = []
    recent = []
    gen = 0
    stop = "max_evals"

    if cfg.x0 is not None:
        f0 = evaluate(mean)
        evals += 1
        x_best, f_best = mean.copy(), f0

    while evals + lam <= cfg.max_evals:
        z = rng.standard_normal((lam, d))
        y = (z * D) @ B.T
        u = reflect_unit(mean + sigma * y)
        # steps are recomputed from the repaired points
        y = (u - mean) / sigma
        f = np.array([evaluate(ui) for ui in u])
        evals += lam
        gen += 1

        order = np.argsort(f, kind="stable")
        if f[order[0]] < f_best:
            f_best = float(f[order[0]])
            x_best = u[order[0]].copy()
        trace.append(f_best)

        y_sel = y[order[:mu]]
        y_w = w @ y_sel
        mean = mean + sigma * y_w

        invsqrt = (B / D) @ B.T
        ps = (1 - cs) * ps + math.sqrt(cs * (2 - cs) * mueff) * (invsqrt @ y_w)
        ps_norm = np.linalg.norm(ps)
        hsig = ps_norm / math.sqrt(1 - (1 - cs) ** (2 * gen)) < (1.4 + 2 / (d + 1)) * chi_n
        pc = (1 - cc) * pc + hsig * math.sqrt(cc * (2 - cc) * mueff) * y_w

        rank_mu = (y_sel.T * w) @ y_sel
        C = (
            (1 - c1 - cmu) * C
            + c1 * (np.outer(pc, pc) + (1 - hsig) * cc * (2 - cc) * C)
            + cmu * rank_mu
        )
        sigma *= math.exp((cs / damps) * (ps_norm / chi_n - 1))
        sigma = min(sigma, 2.0)

        C = 0.5 * (C + C.T)
        eigvals, B = np.linalg.eigh(C)
        D = np.sqrt(np.maximum(eigvals, 1e-300))

        finite = f[np.isfinite(f)]
        recent.append(f_best)
        if len(recent) > 10 + int(30 * d / lam):
            recent.pop(0)
        if (
            gen > 1
            and finite.size == lam
            and (finite.max() - finite.min()) < cfg.tol_fun
            and (max(recent) - min(recent)) < cfg.tol_fun
        ):
            stop = "tol_fun"
            break
        if sigma * D.max() < cfg.tol_x:
            stop = "tol_x"
            break
        if D.max() > 1e7 * D.min():
            stop = "condition"
            break

    if x_best is None:
        # budget never allowed a full generation
        x_best = mean.copy()
        f_best = evaluate(x_best)
        evals += 1
    return OptimResult(
        x_best=lo + x_best * width,
        f_best=f_best,
        evals=evals,
        generations=gen,
        best_trace=trace,
        stop_reason=stop,
    )


def minimize_restarts(objective, cfg: OptimConfig, restarts: int) -> OptimResult:
    """Run ``restarts`` independent searches (seeds ``cfg.seed + k``) and keep the best."""
    if restarts < 1:
        raise ArgumentError("restarts must be >= 1")
    best = None
    total = 0
    for k in range(restarts):
        sub = OptimConfig(
            lower=cfg.lower,
            upper=cfg.upper,
            max_evals=cfg.max_evals,
            seed=cfg.seed + k,
            population=cfg.population,
            tol_fun=cfg.tol_fun,
            tol_x=cfg.tol_x,
            sigma0=cfg.sigma0,
            x0=cfg.x0 if k == 0 else None,
        )
        res = minimize(objective, sub)
        total += res.evals
        if best is None or res.f_best < best.f_best:
            best = res
    best.evals = total
    return best
