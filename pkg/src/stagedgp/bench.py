"""Analytical benchmarks and the repeated-design experiment runner.

Two test problems: the Manhattan function (smooth, oscillating and
checkerboard regions on [-1, 1]^2) and the tip displacement of a shallow
two-bar truss under a random load, which snaps through once the load
exceeds the critical value.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import brentq

from . import pipeline
from .core import ExperimentalDesign, InputModel, MarginalDistribution, mae, nmse, sobol_design
from .errors import ArgumentError, NumericalError, StagedGPError

logger = logging.getLogger(__name__)

METHODS = ("direct", "hard", "soft", "categorical")
CSV_COLUMNS = ("problem", "method", "N", "rep", "seed", "nmse", "mae", "k_clusters", "fit_seconds")


# --------------------------------------------------------------------------
# Manhattan function
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ManhattanSpec:
    checker_rows: int = 4
    checker_cols: int = 4

    def __post_init__(self):
        if self.checker_rows < 1 or self.checker_cols < 1:
            raise ArgumentError("checkerboard needs at least one row and one column")


def manhattan_many(X, spec: ManhattanSpec = ManhattanSpec()) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != 2:
        raise ArgumentError("the Manhattan function takes 2 inputs")
    if np.any(np.abs(X) > 1) or not np.all(np.isfinite(X)):
        raise ArgumentError("inputs must lie in [-1, 1]^2")
    x1, x2 = X[:, 0], X[:, 1]
    out = np.empty(X.shape[0])
    checker = x1 >= 0
    col = np.minimum(np.floor(x1 * spec.checker_cols), spec.checker_cols - 1)
    row = np.minimum(np.floor((x2 + 1.0) * 0.5 * spec.checker_rows), spec.checker_rows - 1)
    out[checker] = ((row + col) % 2 == 0)[checker]
    osc = ~checker & (x2 < 0)
    out[osc] = np.sin(7 * x1[osc]) * np.sin(4 * x2[osc])
    poly = ~checker & (x2 >= 0)
    out[poly] = 1 + (2.0 / 7.0) * (2 * x1[poly] + 1) ** 2 + (2 * x2[poly] + 1) ** 2
    return out


def manhattan(x, spec: ManhattanSpec = ManhattanSpec()) -> float:
    return float(manhattan_many(np.asarray(x, dtype=float).reshape(1, 2), spec)[0])


def manhattan_region(X) -> np.ndarray:
    """0 = checkerboard, 1 = oscillating quadrant, 2 = polynomial quadrant."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return np.where(X[:, 0] >= 0, 0, np.where(X[:, 1] < 0, 1, 2))


# --------------------------------------------------------------------------
# snap-through truss
# --------------------------------------------------------------------------

def default_truss_inputs() -> InputModel:
    # load [N, times load_unit_scale], Young's modulus [GPa], area [cm^2]
    return InputModel((
        MarginalDistribution("gumbel", 430.0, 0.20),
        MarginalDistribution("lognormal", 210.0, 0.10),
        MarginalDistribution("gaussian", 10.0, 0.05),
    ))


@dataclass(frozen=True)
class TrussSpec:
    l0: float = 5.0  # m
    alpha0_deg: float = 10.0
    load_unit_scale: float = 1000.0
    inputs: InputModel = field(default_factory=default_truss_inputs)

    def __post_init__(self):
        if not 0 < self.alpha0_deg < 90:
            raise ArgumentError("alpha0 must lie strictly between 0 and 90 degrees")
        if not self.l0 > 0 or not self.load_unit_scale > 0:
            raise ArgumentError("l0 and load_unit_scale must be positive")
        if self.inputs.dimension != 3:
            raise ArgumentError("the truss input model has three components (P, E, A)")

    @property
    def alpha0(self) -> float:
        return math.radians(self.alpha0_deg)


def truss_load(alpha, E, A, alpha0):
    """Load in equilibrium with inclination ``alpha`` (SI units)."""
    return -2.0 * E * A * np.tan(alpha) * (math.cos(alpha0) - np.cos(alpha))


def critical_angle(alpha0: float) -> float:
    # stationary point of tan(a) (cos a0 - cos a): cos^3 a = cos a0
    return math.acos(math.cos(alpha0) ** (1.0 / 3.0))


def truss_critical_load(E: float, A: float, alpha0: float) -> float:
    """Limit load of the shallow truss (SI units, angle in radians)."""
    if not (E > 0 and A > 0):
        raise ArgumentError("E and A must be positive")
    return float(truss_load(critical_angle(alpha0), E, A, alpha0))


def truss_tip_displacement(alpha, l0, alpha0):
    return l0 * math.cos(alpha0) * (math.tan(alpha0) - np.tan(alpha))


def truss_equilibrium_angle(P: float, E: float, A: float, alpha0: float) -> float:
    """Inclination at equilibrium: stable pre-snap branch up to the critical
    load, the inverted branch beyond it."""
    if P < 0 or not math.isfinite(P):
        raise ArgumentError("load must be finite and non-negative")
    if P == 0:
        return alpha0
    a_cr = critical_angle(alpha0)
    p_cr = float(truss_load(a_cr, E, A, alpha0))
    g = lambda a: float(truss_load(a, E, A, alpha0)) - P
    if P <= p_cr:
        lo, hi = a_cr, alpha0
    else:
        lo, hi = -0.5 * math.pi + 1e-12, -alpha0
    flo, fhi = g(lo), g(hi)
    if flo == 0:
        return lo
    if fhi == 0:
        return hi
    if flo * fhi > 0:
        raise NumericalError("no bracketing root for the truss equilibrium", P=P, E=E, A=A, bracket=(lo, hi))
    return brentq(g, lo, hi, xtol=1e-15, rtol=1e-15, maxiter=500)


def truss_displacement(P: float, E: float, A: float, spec: TrussSpec = TrussSpec()) -> float:
    """Tip displacement [m] for load P [N], modulus E [Pa] and area A [m^2]."""
    alpha = truss_equilibrium_angle(P, E, A, spec.alpha0)
    return float(truss_tip_displacement(alpha, spec.l0, spec.alpha0))


def truss_model(X, spec: TrussSpec = TrussSpec()) -> np.ndarray:
    """Displacement for rows (P, E, A) in table units (scaled load, GPa, cm^2)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return np.array([
        truss_displacement(P * spec.load_unit_scale, E * 1e9, A * 1e-4, spec) for P, E, A in X
    ])


def truss_snapped(X, spec: TrussSpec = TrussSpec()) -> np.ndarray:
    """True where the load exceeds the critical load (post-snap regime)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    E, A = X[:, 1] * 1e9, X[:, 2] * 1e-4
    p_cr = truss_load(critical_angle(spec.alpha0), E, A, spec.alpha0)
    return X[:, 0] * spec.load_unit_scale > p_cr


# --------------------------------------------------------------------------
# problems and experiments
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Problem:
    name: str
    n_inputs: int
    spec: object

    def evaluate(self, X) -> np.ndarray:
        if self.name == "manhattan":
            return manhattan_many(X, self.spec)
        return truss_model(X, self.spec)

    def design(self, n: int, seed: int) -> np.ndarray:
        if self.name == "manhattan":
            return 2.0 * sobol_design(n, 2, seed) - 1.0
        return self.spec.inputs.sobol(n, seed)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.name == "manhattan":
            return rng.uniform(-1.0, 1.0, size=(n, 2))
        return self.spec.inputs.sample(n, rng)

    def regime(self, X) -> np.ndarray:
        if self.name == "manhattan":
            return manhattan_region(X)
        return truss_snapped(X, self.spec).astype(int)


def make_problem(name: str, **options) -> Problem:
    if name == "manhattan":
        return Problem("manhattan", 2, ManhattanSpec(**options))
    if name == "truss":
        return Problem("truss", 3, TrussSpec(**options))
    raise ArgumentError(f"unknown problem {name!r}")


DEFAULT_SIZES = {"manhattan": (100, 200, 400), "truss": (50, 100, 200)}


def derive_seed(master: int, *keys: int) -> int:
    """Deterministic 31-bit child seed for (master, keys...)."""
    return int(np.random.SeedSequence([master, *keys]).generate_state(1)[0] & 0x7FFFFFFF)


@dataclass
class ExperimentReport:
    problem: str
    master_seed: int
    rows: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def cell(self, method: str, n: int, key: str = "nmse") -> np.ndarray:
        vals = [r[key] for r in self.rows if r["method"] == method and r["N"] == n]
        return np.array([v for v in vals if v is not None], dtype=float)

    def summary(self) -> dict:
        out = {"problem": self.problem, "master_seed": self.master_seed, "cells": [],
               "failures": self.failures, "config": self.config}
        sizes = sorted({r["N"] for r in self.rows})
        methods = [m for m in METHODS if any(r["method"] == m for r in self.rows)]
        for n in sizes:
            for m in methods:
                cell = {"N": n, "method": m}
                for key in ("nmse", "mae"):
                    v = self.cell(m, n, key)
                    if v.size:
                        q1, med, q3 = np.percentile(v, [25, 50, 75])
                        cell[key] = {"median": float(med), "q1": float(q1), "q3": float(q3), "count": int(v.size)}
                    else:
                        cell[key] = None
                k = self.cell(m, n, "k_clusters")
                cell["k_clusters"] = [int(x) for x in k]
                out["cells"].append(cell)
        return out

    def median(self, method: str, n: int, key: str = "nmse") -> float:
        v = self.cell(method, n, key)
        return float(np.median(v)) if v.size else math.nan

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# stagedgp bench problem={self.problem} master_seed={self.master_seed}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow(["" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else r[c])
                        for c in CSV_COLUMNS])
        return buf.getvalue()

    def summary_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True) + "\n"


@dataclass
class RepResult:
    """Everything produced by one repetition, for diagnostics beyond the report."""

    fitted: Optional[pipeline.FittedPipeline]
    X_val: np.ndarray
    y_val: np.ndarray
    predictions: dict


def run_repetition(problem: Problem, n: int, rep: int, master_seed: int,
                   cfg: pipeline.PipelineConfig = pipeline.PipelineConfig(),
                   methods: Sequence[str] = METHODS, n_val: int = 10_000):
    """Fit one design and score every method on a shared validation set.

    Returns (report rows, RepResult, failures).
    """
    seed = derive_seed(master_seed, n, rep)
    X = problem.design(n, seed + 1)  # seed 0 would disable the Sobol shift
    y = problem.evaluate(X)
    X_val = problem.sample(n_val, np.random.default_rng(derive_seed(master_seed, 0, rep)))
    y_val = problem.evaluate(X_val)
    rows, failures, preds = [], [], {}
    base = {"problem": problem.name, "N": n, "rep": rep, "seed": seed}
    fitted = None
    t0 = time.perf_counter()
    try:
        fitted = pipeline.fit_pipeline(ExperimentalDesign(X, y), cfg, seed)
    except StagedGPError as exc:
        logger.error("%s N=%d rep=%d: fit failed: %s", problem.name, n, rep, exc)
        failures.append({**base, "method": "*", "error": str(exc)})
    fit_seconds = time.perf_counter() - t0
    for m in methods:
        row = {**base, "method": m, "nmse": None, "mae": None, "k_clusters": None, "fit_seconds": fit_seconds}
        if fitted is not None:
            row["k_clusters"] = fitted.n_clusters
            try:
                pb = pipeline.predict_batch(fitted, X_val, m)
                preds[m] = pb
                row["nmse"] = nmse(y_val, pb.mean)
                row["mae"] = mae(y_val, pb.mean)
            except StagedGPError as exc:
                logger.error("%s N=%d rep=%d %s: %s", problem.name, n, rep, m, exc)
                failures.append({**base, "method": m, "error": str(exc)})
        rows.append(row)
    return rows, RepResult(fitted, X_val, y_val, preds), failures


def run_experiment(problem, sizes: Optional[Sequence[int]] = None, reps: int = 20,
                   methods: Sequence[str] = METHODS, seed: int = 0,
                   cfg: pipeline.PipelineConfig = pipeline.PipelineConfig(),
                   n_val: int = 10_000, record_timings: bool = False, threads: int = 1) -> ExperimentReport:
    """Repeat design -> fit -> validate for every size and repetition.

    Wall-clock fit times are only written when ``record_timings`` is set so
    that reports are reproducible byte for byte.
    """
    if isinstance(problem, str):
        problem = make_problem(problem)
    for m in methods:
        if m not in METHODS:
            raise ArgumentError(f"unknown method {m!r}")
    if reps < 1:
        raise ArgumentError("reps must be >= 1")
    sizes = tuple(DEFAULT_SIZES[problem.name] if sizes is None else sizes)
    report = ExperimentReport(problem.name, seed, config={"sizes": list(sizes), "reps": reps,
                                                          "methods": list(methods), "n_val": n_val})
    jobs = [(n, r) for n in sizes for r in range(reps)]

    def work(job):
        n, r = job
        rows, _, failures = run_repetition(problem, n, r, seed, cfg, methods, n_val)
        return rows, failures

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(work, jobs))
    else:
        results = [work(j) for j in jobs]
    for (n, r), (rows, failures) in zip(jobs, results):
        for row in rows:
            if not record_timings:
                row["fit_seconds"] = None
            report.rows.append(row)
        report.failures.extend(failures)
        logger.info("%s N=%d rep=%d done", problem.name, n, r)
    return report
