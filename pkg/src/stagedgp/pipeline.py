"""Cluster, classify, regress: the staged surrogate and its recombination modes.

Training runs in standardized units. The joint (x, y) points are clustered
with the DP mixture, an SVC learns the cluster labels from x alone, and a
Kriging model is fitted per cluster (and/or one GP with the label as an
extra categorical input). Predictions are returned in model units.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import dpmm, gp, svc
from .dpmm import DpmmConfig
from .gp import GpConfig
from .svc import SvcTuning
from .core import ExperimentalDesign, Standardizer, fit_standardizer
from .errors import ArgumentError, ArtifactError, StageError, StagedGPError

logger = logging.getLogger(__name__)

MODES = ("hard", "soft", "categorical", "all")
PREDICT_MODES = ("hard", "soft", "categorical", "direct")


@dataclass(frozen=True)
class PipelineConfig:
    dpmm: DpmmConfig = DpmmConfig()
    svc: SvcTuning = SvcTuning()
    gp: GpConfig = GpConfig()
    categorical_gp: GpConfig = GpConfig(kernel="gaussian")
    recombination: str = "all"
    standardize: bool = True
    fit_direct: bool = True

    def __post_init__(self):
        if self.recombination not in MODES:
            raise ArgumentError(f"recombination must be one of {MODES}")
        if self.categorical_gp.trend != self.gp.trend:
            raise ArgumentError("local and categorical GPs must share the trend")

    @property
    def wants_local(self) -> bool:
        return self.recombination in ("hard", "soft", "all")

    @property
    def wants_categorical(self) -> bool:
        return self.recombination in ("categorical", "all")


@dataclass(frozen=True)
class Prediction:
    mean: float
    variance: float
    class_probs: np.ndarray
    label: int


@dataclass(frozen=True)
class PredictionBatch:
    mean: np.ndarray
    variance: np.ndarray
    class_probs: np.ndarray  # N x K
    label: np.ndarray

    def __len__(self):
        return self.mean.size

    def row(self, i: int) -> Prediction:
        return Prediction(float(self.mean[i]), float(self.variance[i]), self.class_probs[i], int(self.label[i]))


@dataclass(frozen=True)
class FittedPipeline:
    standardizer: Standardizer
    clustering: dpmm.ClusteringResult
    labels: np.ndarray  # training labels after small-cluster merging, 1..K
    classifier: Optional[svc.MulticlassSvc]
    local_gps: tuple
    categorical_gp: Optional[gp.CategoricalGpModel]
    direct_gp: Optional[gp.GpModel]
    mode: str = "all"
    seed: int = 0
    timings: dict = field(default_factory=dict, compare=False)

    @property
    def n_clusters(self) -> int:
        return int(self.labels.max())

    @property
    def n_inputs(self) -> int:
        return self.standardizer.n_inputs


# --------------------------------------------------------------------------
# fitting
# --------------------------------------------------------------------------

def merge_small_clusters(labels, means, covs, min_size: int):
    """Fold clusters with fewer than ``min_size`` points into their nearest
    neighbour (Mahalanobis distance between cluster centres, measured with the
    receiving cluster's covariance), smallest first. Returns labels 1..K'."""
    labels = np.asarray(labels).copy()
    K = means.shape[0]
    alive = list(range(1, K + 1))
    while len(alive) > 1:
        counts = {k: int(np.sum(labels == k)) for k in alive}
        small = [k for k in alive if counts[k] < min_size]
        if not small:
            break
        s = min(small, key=lambda k: (counts[k], -k))
        best, best_d = None, np.inf
        for j in alive:
            if j == s:
                continue
            diff = means[s - 1] - means[j - 1]
            d = float(diff @ np.linalg.solve(covs[j - 1], diff))
            if d < best_d:
                best, best_d = j, d
        logger.info("merging cluster %d (%d points) into %d", s, counts[s], best)
        labels[labels == s] = best
        alive.remove(s)
    relabel = {k: i + 1 for i, k in enumerate(alive)}
    return np.array([relabel[k] for k in labels], dtype=int)


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StagedGPError as exc:
        if isinstance(exc, StageError):
            raise
        raise StageError(name, exc) from exc
    except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        raise StageError(name, exc) from exc


def fit_pipeline(ed: ExperimentalDesign, cfg: PipelineConfig = PipelineConfig(), seed: int = 0) -> FittedPipeline:
    """Fit all three stages.

    Every stage draws its randomness from ``seed``; local GP k uses
    ``seed + k`` so that with a single cluster the local GP coincides with
    the direct baseline.
    """
    if ed.n_points < 10:
        raise ArgumentError(f"at least 10 points are required, got {ed.n_points}")
    timings = {}
    std = fit_standardizer(ed) if cfg.standardize else Standardizer.identity(ed.n_inputs)
    Z = std.standardize(ed.joint())
    X, y = Z[:, :-1], Z[:, -1]

    t0 = time.perf_counter()
    _, clustering = _stage("clustering", dpmm.fit, Z, cfg.dpmm, seed)
    timings["clustering"] = time.perf_counter() - t0

    p = cfg.gp.trend.size(ed.n_inputs)
    labels = merge_small_clusters(clustering.labels, clustering.cluster_means, clustering.cluster_covs, p + 2)
    K = int(labels.max())

    t0 = time.perf_counter()
    classifier = None
    if K >= 2:
        classifier = _stage("classification", svc.train_multiclass, X, labels, cfg.svc, seed)
    timings["classification"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    direct = _stage("regression", gp.fit, X, y, cfg.gp, seed) if (cfg.fit_direct or K == 1) else None
    local = ()
    if cfg.wants_local or K == 1:
        if K == 1:
            local = (direct,)
        else:
            local = tuple(
                _stage("regression", gp.fit, X[labels == k], y[labels == k], cfg.gp, seed + k - 1)
                for k in range(1, K + 1)
            )
    cat = None
    if cfg.wants_categorical and K >= 2:
        cat = _stage("regression", gp.fit_categorical, X, labels, y, cfg.categorical_gp, seed)
    if not cfg.fit_direct:
        direct = None
    timings["regression"] = time.perf_counter() - t0

    return FittedPipeline(
        standardizer=std,
        clustering=clustering,
        labels=labels,
        classifier=classifier,
        local_gps=local,
        categorical_gp=cat,
        direct_gp=direct,
        mode=cfg.recombination,
        seed=seed,
        timings=timings,
    )


def fit_direct_baseline(ed: ExperimentalDesign, cfg: gp.GpConfig = gp.GpConfig(), seed: int = 0,
                        standardize: bool = True):
    """Single GP on the whole design. Returns (standardizer, GpModel)."""
    std = fit_standardizer(ed) if standardize else Standardizer.identity(ed.n_inputs)
    Z = std.standardize(ed.joint())
    return std, gp.fit(Z[:, :-1], Z[:, -1], cfg, seed)


def predict_direct(baseline, X):
    """(mean, variance) arrays in model units for a ``fit_direct_baseline`` result."""
    std, model = baseline
    Xs = std.standardize_inputs(_check_inputs(X, std.n_inputs))
    m, v = gp.predict_many(model, Xs)
    return std.destandardize_outputs(m), std.destandardize_variance(v)


# --------------------------------------------------------------------------
# prediction
# --------------------------------------------------------------------------

def _check_inputs(X, m):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :] if X.size == m else X[:, None]
    if X.ndim != 2 or X.shape[1] != m:
        raise ArgumentError(f"expected inputs with {m} columns, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ArgumentError("inputs must be finite")
    return X


def _classify(fp: FittedPipeline, Xs, need_probs=True):
    n = Xs.shape[0]
    if fp.classifier is None:
        return np.ones(n, dtype=int), np.ones((n, 1))
    labels, probs = svc.predict_labels(fp.classifier, Xs, return_probs=True)
    return labels.astype(int), probs


def _local_predictions(fp, Xs):
    """Means and variances of every local GP, each N x K (standardized units)."""
    out = [gp.predict_many(m, Xs) for m in fp.local_gps]
    return np.column_stack([o[0] for o in out]), np.column_stack([o[1] for o in out])


def _finish(fp, mean, var, probs, labels):
    std = fp.standardizer
    return PredictionBatch(
        mean=std.destandardize_outputs(mean),
        variance=std.destandardize_variance(var),
        class_probs=probs,
        label=labels,
    )


def predict_batch(fp: FittedPipeline, X, mode: str = "hard") -> PredictionBatch:
    """Predict at every row of X with the chosen recombination mode."""
    if mode not in PREDICT_MODES:
        raise ArgumentError(f"mode must be one of {PREDICT_MODES}")
    Xs = fp.standardizer.standardize_inputs(_check_inputs(X, fp.n_inputs))
    n = Xs.shape[0]
    labels, probs = _classify(fp, Xs)

    if mode == "direct":
        if fp.direct_gp is None:
            raise ArgumentError("pipeline was fitted without the direct baseline")
        m, v = gp.predict_many(fp.direct_gp, Xs)
        return _finish(fp, m, v, probs, labels)

    if mode == "categorical" and fp.categorical_gp is not None:
        m, v = gp.predict_categorical_many(fp.categorical_gp, Xs, labels)
        return _finish(fp, m, v, probs, labels)
    if mode == "categorical" and fp.n_clusters >= 2:
        raise ArgumentError("pipeline was fitted without the categorical GP")

    if not fp.local_gps:
        raise ArgumentError("pipeline was fitted without local GPs")
    if mode == "soft":
        M, V = _local_predictions(fp, Xs)
        mean = np.sum(probs * M, axis=1)
        var = np.sum(probs * (V + M * M), axis=1) - mean * mean
        return _finish(fp, mean, np.maximum(var, 0.0), probs, labels)

    # hard (and categorical with a single cluster): the classified cluster's GP
    mean = np.empty(n)
    var = np.empty(n)
    for k in np.unique(labels):
        rows = labels == k
        mean[rows], var[rows] = gp.predict_many(fp.local_gps[k - 1], Xs[rows])
    return _finish(fp, mean, var, probs, labels)


def predict_hard(fp: FittedPipeline, x) -> Prediction:
    return predict_batch(fp, np.asarray(x, dtype=float).reshape(1, -1), "hard").row(0)


def predict_soft(fp: FittedPipeline, x) -> Prediction:
    return predict_batch(fp, np.asarray(x, dtype=float).reshape(1, -1), "soft").row(0)


def predict_categorical(fp: FittedPipeline, x) -> Prediction:
    return predict_batch(fp, np.asarray(x, dtype=float).reshape(1, -1), "categorical").row(0)


# --------------------------------------------------------------------------
# serialization
# --------------------------------------------------------------------------

FORMAT_NAME = "stagedgp-pipeline"
FORMAT_VERSION = 1

# top-level layout of the artifact; its hash is embedded and checked on load
_SCHEMA = {
    "standardizer": ["means", "stds"],
    "clustering": ["n_clusters", "labels", "responsibilities", "weights", "cluster_means",
                   "cluster_covs", "converged", "elbo"],
    "labels": "int[]",
    "classifier": ["classes", "coupling_max_iters", "coupling_tol", "pairs"],
    "pair": ["first", "second", "support_inputs", "support_coeffs", "bias", "penalty",
             "lengthscales", "convention", "labels", "platt_slope", "platt_intercept"],
    "gp": ["degree", "kernel", "lengthscales", "nugget", "inputs", "outputs"],
    "categorical_gp": ["base", "theta_cat", "training_labels"],
    "pipeline": ["mode", "seed", "local_gps", "categorical_gp", "direct_gp"],
}
SCHEMA_HASH = hashlib.sha256(json.dumps(_SCHEMA, sort_keys=True).encode()).hexdigest()[:16]


def _arr(a):
    return np.asarray(a).tolist()


def _gp_to_dict(m: gp.GpModel):
    return {
        "degree": m.trend.degree,
        "kernel": m.kernel,
        "lengthscales": _arr(m.lengthscales),
        "nugget": m.nugget,
        "inputs": _arr(m.training_inputs),
        "outputs": _arr(m.training_outputs),
    }


def _gp_from_dict(d):
    cfg = gp.GpConfig(trend=gp.TrendSpec(d["degree"]), kernel=d["kernel"])
    return gp.assemble(np.array(d["inputs"], dtype=float), np.array(d["outputs"], dtype=float),
                       np.array(d["lengthscales"], dtype=float), cfg, nugget=d["nugget"])


def to_dict(fp: FittedPipeline) -> dict:
    c = fp.clustering
    out = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "schema": SCHEMA_HASH,
        "mode": fp.mode,
        "seed": fp.seed,
        "standardizer": {"means": _arr(fp.standardizer.means), "stds": _arr(fp.standardizer.stds)},
        "clustering": {
            "n_clusters": c.n_clusters,
            "labels": _arr(c.labels),
            "responsibilities": _arr(c.responsibilities),
            "weights": _arr(c.weights),
            "cluster_means": _arr(c.cluster_means),
            "cluster_covs": _arr(c.cluster_covs),
            "converged": bool(c.converged),
            "elbo": c.elbo,
        },
        "labels": _arr(fp.labels),
        "classifier": None,
        "local_gps": [_gp_to_dict(m) for m in fp.local_gps],
        "categorical_gp": None,
        "direct_gp": None if fp.direct_gp is None else _gp_to_dict(fp.direct_gp),
    }
    if fp.classifier is not None:
        cl = fp.classifier
        out["classifier"] = {
            "classes": list(cl.classes),
            "coupling_max_iters": cl.coupling_max_iters,
            "coupling_tol": cl.coupling_tol,
            "pairs": [
                {
                    "first": pc.first,
                    "second": pc.second,
                    "support_inputs": _arr(pc.model.support_inputs),
                    "support_coeffs": _arr(pc.model.support_coeffs),
                    "bias": pc.model.bias,
                    "penalty": pc.model.penalty,
                    "lengthscales": _arr(pc.model.kernel.lengthscales),
                    "convention": pc.model.kernel.convention,
                    "labels": list(pc.model.labels),
                    "platt_slope": pc.platt.slope,
                    "platt_intercept": pc.platt.intercept,
                }
                for pc in cl.pairs
            ],
        }
    if fp.categorical_gp is not None:
        cg = fp.categorical_gp
        out["categorical_gp"] = {
            "base": _gp_to_dict(cg.base),
            "theta_cat": cg.theta_cat,
            "training_labels": _arr(cg.training_labels),
        }
    return out


def from_dict(d: dict) -> FittedPipeline:
    if not isinstance(d, dict) or d.get("format") != FORMAT_NAME:
        raise ArtifactError("not a pipeline artifact")
    if d.get("version") != FORMAT_VERSION:
        raise ArtifactError(f"unsupported artifact version {d.get('version')!r} (expected {FORMAT_VERSION})")
    if d.get("schema") != SCHEMA_HASH:
        raise ArtifactError("artifact schema hash does not match this reader")
    try:
        std = Standardizer(np.array(d["standardizer"]["means"]), np.array(d["standardizer"]["stds"]))
        c = d["clustering"]
        clustering = dpmm.ClusteringResult(
            n_clusters=int(c["n_clusters"]),
            labels=np.array(c["labels"], dtype=int),
            responsibilities=np.array(c["responsibilities"], dtype=float),
            weights=np.array(c["weights"], dtype=float),
            cluster_means=np.array(c["cluster_means"], dtype=float),
            cluster_covs=np.array(c["cluster_covs"], dtype=float),
            converged=bool(c["converged"]),
            elbo=float(c["elbo"]),
        )
        classifier = None
        if d["classifier"] is not None:
            cl = d["classifier"]
            pairs = []
            for p in cl["pairs"]:
                model = svc.BinarySvcModel(
                    support_inputs=np.array(p["support_inputs"], dtype=float).reshape(len(p["support_coeffs"]), -1),
                    support_coeffs=np.array(p["support_coeffs"], dtype=float),
                    bias=float(p["bias"]),
                    penalty=float(p["penalty"]),
                    kernel=svc.KernelParams(np.array(p["lengthscales"], dtype=float), p["convention"]),
                    labels=tuple(p["labels"]),
                )
                platt = svc.PlattCalibration(float(p["platt_slope"]), float(p["platt_intercept"]))
                pairs.append(svc.PairClassifier(int(p["first"]), int(p["second"]), model, platt))
            classifier = svc.MulticlassSvc(
                tuple(int(k) for k in cl["classes"]), tuple(pairs),
                int(cl["coupling_max_iters"]), float(cl["coupling_tol"]),
            )
        cat = None
        if d["categorical_gp"] is not None:
            cg = d["categorical_gp"]
            b = cg["base"]
            cfg = gp.GpConfig(trend=gp.TrendSpec(b["degree"]), kernel=b["kernel"])
            cat = gp.assemble_categorical(
                np.array(b["inputs"], dtype=float), np.array(cg["training_labels"], dtype=int),
                np.array(b["outputs"], dtype=float), np.array(b["lengthscales"], dtype=float),
                float(cg["theta_cat"]), cfg,
            )
        return FittedPipeline(
            standardizer=std,
            clustering=clustering,
            labels=np.array(d["labels"], dtype=int),
            classifier=classifier,
            local_gps=tuple(_gp_from_dict(g) for g in d["local_gps"]),
            categorical_gp=cat,
            direct_gp=None if d["direct_gp"] is None else _gp_from_dict(d["direct_gp"]),
            mode=d["mode"],
            seed=int(d["seed"]),
        )
    except (KeyError, TypeError) as exc:
        raise ArtifactError(f"malformed artifact: missing or invalid field {exc}") from exc


def dumps(fp: FittedPipeline) -> str:
    """Deterministic JSON text (floats in shortest round-trip form)."""
    return json.dumps(to_dict(fp), sort_keys=True, separators=(",", ":"), allow_nan=True) + "\n"


def loads(text: str) -> FittedPipeline:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ArtifactError(f"artifact is not valid JSON: {exc}") from exc
    return from_dict(d)


def save(fp: FittedPipeline, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(fp))


def load(path) -> FittedPipeline:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())


def summary(fp: FittedPipeline) -> dict:
    """Human-oriented overview of a fitted pipeline."""
    out = {
        "n_clusters": fp.n_clusters,
        "dpmm_clusters": fp.clustering.n_clusters,
        "cluster_sizes": np.bincount(fp.labels, minlength=fp.n_clusters + 1)[1:].tolist(),
        "timings_seconds": {k: round(v, 3) for k, v in fp.timings.items()},
        "local_gps": [{"lengthscales": _arr(m.lengthscales), "sigma2": m.sigma2_hat} for m in fp.local_gps],
    }
    if fp.classifier is not None:
        out["classifier"] = [
            {"pair": [pc.first, pc.second], "C": pc.model.penalty, "theta": _arr(pc.model.kernel.lengthscales)}
            for pc in fp.classifier.pairs
        ]
    if fp.categorical_gp is not None:
        out["categorical_gp"] = {"theta_cat": fp.categorical_gp.theta_cat,
                                 "lengthscales": _arr(fp.categorical_gp.base.lengthscales)}
    return out
