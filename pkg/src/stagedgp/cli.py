"""Command-line front end: fit, predict, bench, report.

Configuration files are YAML or JSON; unknown keys are rejected. Log
verbosity comes from the STAGEDGP_LOG_LEVEL environment variable.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from pathlib import Path
from typing import List, Literal, Optional, Tuple

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from . import bench, pipeline
from .core import ExperimentalDesign
from .dpmm import DpmmConfig
from .errors import ArtifactError, ConfigError, InputError, StagedGPError
from .gp import GpConfig, TrendSpec
from .svc import SvcTuning

logger = logging.getLogger("stagedgp")

LOG_ENV = "STAGEDGP_LOG_LEVEL"


# --------------------------------------------------------------------------
# configuration schema
# --------------------------------------------------------------------------

class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DpmmSection(_Strict):
    alpha: float = Field(1.0, gt=0)
    truncation: int = Field(20, ge=2)
    base_scale: float = Field(0.01, gt=0)
    base_dof: Optional[float] = None
    max_iters: int = Field(500, ge=1)
    elbo_tol: float = Field(1e-6, gt=0)
    restarts: int = Field(5, ge=1)
    prune_weight: float = Field(0.01, gt=0, lt=1)
    prune_min_points: int = Field(3, ge=0)
    init_blend: float = Field(0.9, ge=0, le=1)
    init_centers: Optional[int] = Field(5, ge=1)
    init_lloyd_iters: int = Field(50, ge=0)


class SvcSection(_Strict):
    log10_c: Tuple[float, float] = (-2.0, 4.0)
    log10_theta: Tuple[float, float] = (-2.0, 2.0)
    budget: int = Field(60, ge=2)
    isotropic: bool = True
    convention: Literal["printed", "standard"] = "printed"
    tol: float = Field(1e-6, gt=0)
    loo_tol: float = Field(1e-3, gt=0)


class GpSection(_Strict):
    trend: Literal[0, 1] = 0
    kernel: Literal["matern52", "gaussian"] = "matern52"
    nugget: float = Field(1e-8, ge=0)
    optimize_nugget: bool = False
    log10_theta: Tuple[float, float] = (-2.0, 2.0)
    theta_cat: Tuple[float, float] = (1e-3, 10.0)
    restarts: int = Field(3, ge=1)
    budget: int = Field(600, ge=10)
    tol_x: float = Field(1e-4, gt=0)


class PipelineSection(_Strict):
    recombination: Literal["hard", "soft", "categorical", "all"] = "all"
    standardize: bool = True
    fit_direct: bool = True
    dpmm: DpmmSection = DpmmSection()
    svc: SvcSection = SvcSection()
    gp: GpSection = GpSection()
    categorical_gp: GpSection = GpSection(kernel="gaussian")


class Threshold(_Strict):
    """median(metric of method at N) < factor * median(metric of baseline), or < value."""

    N: int
    method: Literal["direct", "hard", "soft", "categorical"]
    metric: Literal["nmse", "mae"] = "nmse"
    below_method: Optional[Literal["direct", "hard", "soft", "categorical"]] = None
    factor: float = Field(1.0, gt=0)
    below: Optional[float] = None
    allow_equal: bool = False


class ClusterThreshold(_Strict):
    """At least ``min_count`` repetitions at N with k_clusters in [k_min, k_max]."""

    N: int
    k_min: int
    k_max: int
    min_count: int


class OutputSection(_Strict):
    csv: str = "bench.csv"
    summary: str = "bench_summary.json"


class RunConfig(_Strict):
    problem: Literal["manhattan", "truss"] = "manhattan"
    problem_options: dict = Field(default_factory=dict)
    sizes: Optional[List[int]] = None
    reps: int = Field(20, ge=1)
    methods: List[Literal["direct", "hard", "soft", "categorical"]] = list(bench.METHODS)
    seed: int = 0
    n_val: int = Field(10_000, ge=2)
    record_timings: bool = False
    pipeline: PipelineSection = PipelineSection()
    output: OutputSection = OutputSection()
    thresholds: List[Threshold] = Field(default_factory=list)
    cluster_thresholds: List[ClusterThreshold] = Field(default_factory=list)


PRESETS = {
    "manhattan": {
        "problem": "manhattan",
        "sizes": [100, 200, 400],
        "thresholds": [
            {"N": n, "method": m, "metric": k, "below_method": "direct"}
            for n in (100, 200, 400) for m in ("hard", "soft") for k in ("nmse", "mae")
        ] + [{"N": 400, "method": "soft", "metric": "mae", "below_method": "hard", "allow_equal": True}],
        "cluster_thresholds": [{"N": 200, "k_min": 3, "k_max": 5, "min_count": 16}],
    },
    "truss": {
        "problem": "truss",
        "sizes": [50, 100, 200],
        "thresholds": [
            {"N": 200, "method": "hard", "metric": "nmse", "below_method": "direct", "factor": 0.1,
             "allow_equal": True},
        ],
        "cluster_thresholds": [{"N": 200, "k_min": 2, "k_max": 2, "min_count": 18}],
    },
}


def _validation_error(exc: ValidationError) -> ConfigError:
    err = exc.errors()[0]
    path = ".".join(str(p) for p in err["loc"])
    return ConfigError(err["msg"], key_path=path)


def parse_config(data: dict) -> RunConfig:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a mapping")
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise _validation_error(exc) from None


def load_config(path: Optional[str], preset: Optional[str] = None) -> RunConfig:
    data = json.loads(json.dumps(PRESETS[preset])) if preset else {}
    if path:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        try:
            loaded = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"not valid YAML/JSON: {exc}") from None
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigError("configuration must be a mapping")
        data.update(loaded or {})
    return parse_config(data)


def _gp_config(s: GpSection) -> GpConfig:
    return GpConfig(
        trend=TrendSpec(s.trend), kernel=s.kernel, nugget=s.nugget, optimize_nugget=s.optimize_nugget,
        log10_theta=tuple(s.log10_theta), theta_cat=tuple(s.theta_cat), restarts=s.restarts,
        budget=s.budget, tol_x=s.tol_x,
    )


def pipeline_config(s: PipelineSection) -> pipeline.PipelineConfig:
    d = s.dpmm
    try:
        return pipeline.PipelineConfig(
            dpmm=DpmmConfig(
                alpha=d.alpha, truncation=d.truncation, base_scale=d.base_scale, base_dof=d.base_dof,
                max_iters=d.max_iters, elbo_tol=d.elbo_tol, restarts=d.restarts, prune_weight=d.prune_weight,
                prune_min_points=d.prune_min_points, init_blend=d.init_blend,
                init_centers=d.init_centers, init_lloyd_iters=d.init_lloyd_iters,
            ),
            svc=SvcTuning(
                log10_c=tuple(s.svc.log10_c), log10_theta=tuple(s.svc.log10_theta), budget=s.svc.budget,
                isotropic=s.svc.isotropic, convention=s.svc.convention, tol=s.svc.tol, loo_tol=s.svc.loo_tol,
            ),
            gp=_gp_config(s.gp),
            categorical_gp=_gp_config(s.categorical_gp),
            recombination=s.recombination,
            standardize=s.standardize,
            fit_direct=s.fit_direct,
        )
    except StagedGPError as exc:
        raise ConfigError(str(exc), key_path="pipeline") from None


# --------------------------------------------------------------------------
# CSV helpers
# --------------------------------------------------------------------------

def read_numeric_csv(path: str):
    """Return (header, N x C float matrix). Lines starting with '#' are skipped."""
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from None
    with fh:
        reader = csv.reader(line for line in fh if not line.startswith("#"))
        try:
            header = next(reader)
        except StopIteration:
            raise InputError(f"{path} is empty") from None
        header = [h.strip() for h in header]
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise InputError(f"{path} row {lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                raise InputError(f"{path} row {lineno}: non-numeric cell") from None
    if not rows:
        raise InputError(f"{path} has no data rows")
    data = np.array(rows)
    if not np.all(np.isfinite(data)):
        raise InputError(f"{path} contains non-finite values")
    return header, data


def _fmt(v) -> str:
    return repr(float(v))


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_fit(args) -> int:
    cfg = load_config(args.config)
    header, data = read_numeric_csv(args.data)
    if data.shape[1] < 2:
        raise InputError("the data file needs at least one input and one output column")
    ed = ExperimentalDesign(data[:, :-1], data[:, -1])
    seed = cfg.seed if args.seed is None else args.seed
    fp = pipeline.fit_pipeline(ed, pipeline_config(cfg.pipeline), seed)
    pipeline.save(fp, args.out)
    summary = pipeline.summary(fp)
    summary.update({"inputs": header[:-1], "output": header[-1], "seed": seed, "artifact": args.out})
    # printed rather than written: timings would break byte-identical reruns
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_predict(args) -> int:
    try:
        fp = pipeline.load(args.artifact)
    except OSError as exc:
        raise ArtifactError(f"cannot read artifact: {exc}") from None
    header, X = read_numeric_csv(args.data)
    m = fp.n_inputs
    if X.shape[1] == m + 1:  # a training-style file: drop the output column
        X = X[:, :m]
        header = header[:m]
    if X.shape[1] != m:
        raise InputError(f"model expects {m} input columns, file has {X.shape[1]}")
    pb = pipeline.predict_batch(fp, X, args.mode)
    K = pb.class_probs.shape[1]
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# stagedgp predict master_seed={fp.seed} mode={args.mode}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(header) + ["mean", "variance", "label"] + [f"class_prob_{k + 1}" for k in range(K)])
        for i in range(X.shape[0]):
            w.writerow([_fmt(v) for v in X[i]] + [_fmt(pb.mean[i]), _fmt(pb.variance[i]), int(pb.label[i])]
                       + [_fmt(p) for p in pb.class_probs[i]])
    logger.info("wrote %d predictions to %s", X.shape[0], args.out)
    return 0


def check_thresholds(report: bench.ExperimentReport, cfg: RunConfig) -> List[str]:
    """Human-readable failures of the thresholds embedded in the config."""
    failures = []
    for t in cfg.thresholds:
        lhs = report.median(t.method, t.N, t.metric)
        if t.below_method is not None:
            rhs = t.factor * report.median(t.below_method, t.N, t.metric)
            what = f"{t.factor:g} x median {t.metric}({t.below_method})"
        elif t.below is not None:
            rhs = t.below
            what = f"{t.below:g}"
        else:
            continue
        ok = (lhs <= rhs) if t.allow_equal else (lhs < rhs)
        if not (math.isfinite(lhs) and math.isfinite(rhs) and ok):
            failures.append(f"N={t.N}: median {t.metric}({t.method}) = {lhs:.4g} not below {what} = {rhs:.4g}")
    for c in cfg.cluster_thresholds:
        k = report.cell("direct" if "direct" in cfg.methods else cfg.methods[0], c.N, "k_clusters")
        hits = int(np.sum((k >= c.k_min) & (k <= c.k_max)))
        if hits < c.min_count:
            failures.append(f"N={c.N}: K in [{c.k_min}, {c.k_max}] in {hits} runs, need {c.min_count}")
    return failures


def cmd_bench(args) -> int:
    cfg = load_config(args.config, args.preset)
    seed = cfg.seed if args.seed is None else args.seed
    try:
        problem = bench.make_problem(cfg.problem, **cfg.problem_options)
    except TypeError as exc:
        raise ConfigError(str(exc), key_path="problem_options") from None
    report = bench.run_experiment(
        problem, cfg.sizes, cfg.reps, cfg.methods, seed, pipeline_config(cfg.pipeline),
        n_val=cfg.n_val, record_timings=cfg.record_timings, threads=args.threads,
    )
    out_dir = Path(args.out) if args.out else Path(".")
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / cfg.output.csv).write_text(report.to_csv(), encoding="utf-8")
    (out_dir / cfg.output.summary).write_text(report.summary_json(), encoding="utf-8")
    print(format_summary(report.summary()))
    if report.failures:
        logger.warning("%d cell failures, see the summary file", len(report.failures))
    failed = check_thresholds(report, cfg)
    for f in failed:
        print(f"THRESHOLD FAILED: {f}")
    return 1 if failed else 0


def report_from_csv(path: str) -> bench.ExperimentReport:
    with open(path, newline="", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    master, problem = 0, ""
    if lines and lines[0].startswith("#"):
        for tok in lines[0][1:].split():
            if tok.startswith("master_seed="):
                master = int(tok.split("=", 1)[1])
            if tok.startswith("problem="):
                problem = tok.split("=", 1)[1]
        lines = lines[1:]
    reader = csv.DictReader(lines)
    if reader.fieldnames is None or set(bench.CSV_COLUMNS) - set(reader.fieldnames):
        raise InputError(f"{path} is not a bench report (expected columns {bench.CSV_COLUMNS})")
    report = bench.ExperimentReport(problem, master)
    for lineno, r in enumerate(reader, start=2):
        try:
            report.rows.append({
                "problem": r["problem"], "method": r["method"], "N": int(r["N"]), "rep": int(r["rep"]),
                "seed": int(r["seed"]),
                "nmse": float(r["nmse"]) if r["nmse"] else None,
                "mae": float(r["mae"]) if r["mae"] else None,
                "k_clusters": int(r["k_clusters"]) if r["k_clusters"] else None,
                "fit_seconds": float(r["fit_seconds"]) if r["fit_seconds"] else None,
            })
        except ValueError:
            raise InputError(f"{path} row {lineno}: malformed value") from None
        report.problem = report.problem or r["problem"]
    return report


def format_summary(summary: dict) -> str:
    lines = [f"problem={summary['problem']} master_seed={summary['master_seed']}",
             f"{'N':>6} {'method':<12} {'median NMSE':>12} {'median MAE':>12}"]
    for c in summary["cells"]:
        nm = c["nmse"]["median"] if c["nmse"] else float("nan")
        ma = c["mae"]["median"] if c["mae"] else float("nan")
        lines.append(f"{c['N']:>6} {c['method']:<12} {nm:>12.4g} {ma:>12.4g}")
    return "\n".join(lines)


def cmd_report(args) -> int:
    report = report_from_csv(args.data)
    summary = report.summary()
    if args.out:
        Path(args.out).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(format_summary(summary))
    return 0


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stagedgp", description="Clustered surrogate models for discontinuous functions.")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit a pipeline to a CSV design")
    f.add_argument("--config", help="YAML/JSON run configuration")
    f.add_argument("--data", required=True, help="CSV with input columns and the output last")
    f.add_argument("--out", required=True, help="artifact path")
    f.add_argument("--seed", type=int)
    f.add_argument("--threads", type=int, default=1)
    f.set_defaults(func=cmd_fit)

    pr = sub.add_parser("predict", help="predict with a fitted artifact")
    pr.add_argument("--artifact", required=True)
    pr.add_argument("--data", required=True, help="CSV of input points")
    pr.add_argument("--out", required=True)
    pr.add_argument("--mode", choices=pipeline.PREDICT_MODES, default="hard")
    pr.add_argument("--config", help="accepted for symmetry; unused")
    pr.add_argument("--seed", type=int)
    pr.add_argument("--threads", type=int, default=1)
    pr.set_defaults(func=cmd_predict)

    b = sub.add_parser("bench", help="run a benchmark experiment")
    b.add_argument("--config")
    b.add_argument("--preset", choices=sorted(PRESETS))
    b.add_argument("--out", help="output directory")
    b.add_argument("--seed", type=int)
    b.add_argument("--threads", type=int, default=1)
    b.set_defaults(func=cmd_bench)

    r = sub.add_parser("report", help="summarize a bench CSV")
    r.add_argument("--data", required=True)
    r.add_argument("--out", help="write the JSON summary here")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    if getattr(args, "config", None) is None and getattr(args, "preset", None) is None and args.command == "bench":
        print("error: bench needs --config or --preset", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (InputError, ArtifactError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 2
    except StagedGPError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
