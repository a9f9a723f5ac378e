"""Data containers, standardization, error metrics and input sampling."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats
from scipy.stats import qmc

from .errors import (
    ArgumentError,
    DegenerateDataError,
    UnsupportedDimensionError,
)

SOBOL_MAX_DIM = 32
_SOBOL_BITS = 30
EULER_GAMMA = float(np.euler_gamma)


def _as_float_array(a, name, ndim):
    arr = np.asarray(a, dtype=float)
    if arr.ndim != ndim:
        raise ArgumentError(f"{name} must be {ndim}-D, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class ExperimentalDesign:
    """Training data: ``inputs`` is N x M, ``outputs`` has length N."""

    inputs: np.ndarray
    outputs: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=float)
        y = np.asarray(self.outputs, dtype=float).ravel()
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise ArgumentError(f"inputs must be a non-empty N x M matrix, got {x.shape}")
        if x.shape[0] != y.shape[0]:
            raise ArgumentError(
                f"inputs have {x.shape[0]} rows but outputs have length {y.shape[0]}"
            )
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ArgumentError("experimental design contains non-finite entries")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "outputs", y)

    @property
    def n_points(self) -> int:
        return self.inputs.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.inputs.shape[1]

    def joint(self) -> np.ndarray:
        """Rows ``(x, y)`` as an N x (M+1) matrix."""
        return np.column_stack([self.inputs, self.outputs])


@dataclass(frozen=True)
class Standardizer:
    """Per-column affine map for the M inputs and the output (last entry)."""

    means: np.ndarray
    stds: np.ndarray

    def __post_init__(self):
        means = np.asarray(self.means, dtype=float).ravel()
        stds = np.asarray(self.stds, dtype=float).ravel()
        if means.shape != stds.shape or means.size < 2:
            raise ArgumentError("means and stds must be (M+1)-vectors of equal length")
        if not np.all(stds > 0):
            raise DegenerateDataError("every standard deviation must be strictly positive")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "stds", stds)

    @property
    def n_inputs(self) -> int:
        return self.means.size - 1

    def standardize(self, joint):
        """Map (x, y) rows to standardized units."""
        return (np.asarray(joint, dtype=float) - self.means) / self.stds

    def destandardize(self, joint):
        return np.asarray(joint, dtype=float) * self.stds + self.means

    def standardize_inputs(self, x):
        return (np.asarray(x, dtype=float) - self.means[:-1]) / self.stds[:-1]

    def standardize_outputs(self, y):
        return (np.asarray(y, dtype=float) - self.means[-1]) / self.stds[-1]

    def destandardize_outputs(self, y):
        return np.asarray(y, dtype=float) * self.stds[-1] + self.means[-1]

    def destandardize_variance(self, v):
        return np.asarray(v, dtype=float) * self.stds[-1] ** 2

    @classmethod
    def identity(cls, n_inputs: int) -> "Standardizer":
        return cls(np.zeros(n_inputs + 1), np.ones(n_inputs + 1))


def fit_standardizer(ed: ExperimentalDesign) -> Standardizer:
    """Column means and unbiased (N-1) standard deviations of the joint data.

    Raises
    ------
    DegenerateDataError
        If N < 2 or some column is constant. The message names the column.
    """
    if ed.n_points < 2:
        raise DegenerateDataError("at least two points are needed to standardize")
    w = ed.joint()
    means = w.mean(axis=0)
    stds = w.std(axis=0, ddof=1)
    for j, s in enumerate(stds):
        if not s > 0 or s <= 1e-14 * max(1.0, abs(means[j])):
            name = f"input {j}" if j < ed.n_inputs else "output"
            raise DegenerateDataError(f"column {j} ({name}) is constant")
    return Standardizer(means, stds)


# --------------------------------------------------------------------------
# error metrics
# --------------------------------------------------------------------------

def _paired(y_true, y_pred):
    yt = np.asarray(y_true, dtype=float).ravel()
    yp = np.asarray(y_pred, dtype=float).ravel()
    if yt.shape != yp.shape:
        raise ArgumentError(f"length mismatch: {yt.size} vs {yp.size}")
    return yt, yp


def nmse(y_true, y_pred) -> float:
    """Normalized mean-square error: residual sum of squares over total sum of squares."""
    yt, yp = _paired(y_true, y_pred)
    if yt.size < 2:
        raise ArgumentError("nmse needs at least two values")
    denom = np.sum((yt - yt.mean()) ** 2)
    if not denom > 0:
        raise DegenerateDataError("nmse undefined for constant y_true")
    return float(np.sum((yt - yp) ** 2) / denom)


def mae(y_true, y_pred) -> float:
    yt, yp = _paired(y_true, y_pred)
    if yt.size < 1:
        raise ArgumentError("mae needs at least one value")
    return float(np.mean(np.abs(yt - yp)))


# --------------------------------------------------------------------------
# quasi-random designs
# --------------------------------------------------------------------------

def sobol_design(n: int, m: int, seed: int = 0) -> np.ndarray:
    """First ``n`` points of a digitally shifted Sobol sequence in [0, 1)^m.

    The zero point is skipped. ``seed=0`` disables the shift; any other seed
    XORs every coordinate with a fixed random 30-bit mask drawn from it.
    """
    if n < 1:
        raise ArgumentError("n must be >= 1")
    if m < 1:
        raise ArgumentError("m must be >= 1")
    if m > SOBOL_MAX_DIM:
        raise UnsupportedDimensionError(
            f"Sobol direction numbers available up to dimension {SOBOL_MAX_DIM}, got {m}"
        )
    engine = qmc.Sobol(d=m, scramble=False, bits=_SOBOL_BITS)
    engine.fast_forward(1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        pts = engine.random(n)
    scale = float(2**_SOBOL_BITS)
    ints = np.rint(pts * scale).astype(np.uint64)
    if seed != 0:
        rng = np.random.default_rng(seed)
        shift = rng.integers(0, 2**_SOBOL_BITS, size=m, dtype=np.uint64)
        ints = ints ^ shift
    return ints.astype(float) / scale


# --------------------------------------------------------------------------
# probabilistic input model
# --------------------------------------------------------------------------

FAMILIES = ("gaussian", "lognormal", "gumbel")


@dataclass(frozen=True)
class MarginalDistribution:
    """A univariate law given by its mean and coefficient of variation."""

    family: str
    mean: float
    cov: float

    def __post_init__(self):
        fam = self.family.lower()
        if fam not in FAMILIES:
            raise ArgumentError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        object.__setattr__(self, "family", fam)
        if not (np.isfinite(self.mean) and np.isfinite(self.cov)):
            raise ArgumentError("mean and cov must be finite")
        if self.cov <= 0:
            raise ArgumentError("cov must be positive")
        if fam == "lognormal" and self.mean <= 0:
            raise ArgumentError("lognormal marginal needs a positive mean")

    @property
    def std(self) -> float:
        return abs(self.cov * self.mean)

    def native(self):
        """Frozen scipy distribution with moment-matched native parameters."""
        if self.family == "gaussian":
            return stats.norm(loc=self.mean, scale=self.std)
        if self.family == "lognormal":
            s2 = np.log1p(self.cov**2)
            mu = np.log(self.mean) - 0.5 * s2
            return stats.lognorm(s=np.sqrt(s2), scale=np.exp(mu))
        beta = self.std * np.sqrt(6.0) / np.pi
        return stats.gumbel_r(loc=self.mean - EULER_GAMMA * beta, scale=beta)


def inverse_cdf(dist: MarginalDistribution, u):
    """Quantile function of ``dist`` at ``u`` (scalar or array) in (0, 1)."""
    ua = np.asarray(u, dtype=float)
    if not np.all((ua > 0) & (ua < 1)):
        raise ArgumentError("u must lie strictly inside (0, 1)")
    q = dist.native().ppf(ua)
    return float(q) if q.ndim == 0 else q


@dataclass(frozen=True)
class InputModel:
    """Independent marginals, one per input coordinate."""

    marginals: Sequence[MarginalDistribution] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "marginals", tuple(self.marginals))
        if not self.marginals:
            raise ArgumentError("an input model needs at least one marginal")

    @property
    def dimension(self) -> int:
        return len(self.marginals)

    def transform(self, u) -> np.ndarray:
        """Map points of the unit hypercube to the input space column by column."""
        u = np.atleast_2d(np.asarray(u, dtype=float))
        if u.shape[1] != self.dimension:
            raise ArgumentError(f"expected {self.dimension} columns, got {u.shape[1]}")
        return np.column_stack(
            [inverse_cdf(d, u[:, j]) for j, d in enumerate(self.marginals)]
        )

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        u = rng.random((n, self.dimension))
        # rng.random can return exactly 0
        u = np.clip(u, 1e-16, 1 - 1e-16)
        return self.transform(u)

    def sobol(self, n: int, seed: int) -> np.ndarray:
        u = sobol_design(n, self.dimension, seed)
        # an unlucky shift can map a point onto 0
        u = np.clip(u, 2.0**-31, 1 - 2.0**-31)
        return self.transform(u)
