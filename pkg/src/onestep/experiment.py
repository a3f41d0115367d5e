"""Repeated simulation experiments: MSE of each estimator versus the number of machines.

Each repeat draws a fresh true parameter and data set, computes the
centralized estimate once, then runs the protocol for every k in the grid.
Squared errors ||theta_hat - theta_true||^2 are summarized per
(estimator, k) over the repeats.
"""

import csv
import io
import json
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .cluster.protocol import FailurePolicy, Resampling, run_protocol
from .data import GeneratorSpec, generate, rng_stream, shard_split
from .errors import AllMachinesFailed, DomainError, EmptyInput, OneStepError
from .estimators import sandwich_covariance
from .linalg import ConditioningWarning, compensated_sum
from .model import make_model
from .solver import m_estimate

log = logging.getLogger(__name__)

DISTRIBUTED = ("simple_avg", "resampled_avg", "one_step")
POOLED = ("centralized", "centralized_partial")
ESTIMATORS = DISTRIBUTED + POOLED
CSV_COLUMNS = (
    "estimator",
    "k",
    "N",
    "d",
    "K",
    "r",
    "s",
    "mse_mean",
    "mse_std",
    "failures_excluded",
    "seed",
    "wall_ms",
)
STD_CONVENTION = "sample standard deviation, denominator K-1 (0 when K=1)"


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    n: int
    k_grid: tuple
    repeats: int = 50
    estimators: tuple = ("simple_avg", "one_step", "centralized")
    dim: Optional[int] = None
    failure_rate: float = 0.0
    per_round_failures: bool = False
    resample_ratio: float = 0.1
    seed: int = 0
    transport: str = "inproc"
    name: str = ""
    # plug-in sandwich covariance at theta1 on the pooled data, per (repeat, k)
    sandwich: bool = True

    def __post_init__(self):
        object.__setattr__(self, "k_grid", tuple(int(k) for k in self.k_grid))
        object.__setattr__(self, "estimators", tuple(self.estimators))
        unknown = set(self.estimators) - set(ESTIMATORS)
        if unknown:
            raise DomainError(f"unknown estimators {sorted(unknown)}; choose from {', '.join(ESTIMATORS)}")
        if self.repeats < 1:
            raise DomainError("repeats K must be >= 1")
        if not 0.0 <= self.failure_rate < 1.0:
            raise DomainError("failure rate r must lie in [0, 1)")
        if not 0.0 < self.resample_ratio < 1.0:
            raise DomainError("resample ratio s must lie in (0, 1)")
        for k in self.k_grid:
            if k < 1 or self.n % k:
                raise DomainError(f"k={k} does not divide N={self.n}")
        GeneratorSpec(self.kind, self.n, self.seed, self.dim)

    @property
    def d(self):
        return make_model(self.kind, self.dim).dim

    def echo(self):
        out = asdict(self)
        out["k_grid"] = list(self.k_grid)
        out["estimators"] = list(self.estimators)
        out["d"] = self.d
        return out


class Summary(NamedTuple):
    mean: float
    std: float
    count: int

    @property
    def degenerate(self):
        return self.count == 1


def summarize(values):
    """Mean and sample standard deviation (denominator K-1) of squared errors."""
    values = np.asarray(list(values), dtype=float)
    if values.size == 0:
        raise EmptyInput("nothing to summarize")
    if not np.all(np.isfinite(values)):
        raise DomainError("squared errors must be finite")
    mean = float(compensated_sum(values) / values.size)
    if values.size == 1:
        return Summary(mean, 0.0, 1)
    dev = values - mean
    var = float(compensated_sum(dev * dev) / (values.size - 1))
    return Summary(mean, math.sqrt(var), int(values.size))


@dataclass
class ReportRow:
    estimator: str
    k: Optional[int]
    N: int
    d: int
    K: int
    r: float
    s: float
    mse_mean: float
    mse_std: float
    failures_excluded: int
    seed: int
    wall_ms: float

    def csv_cells(self):
        cells = []
        for name in CSV_COLUMNS:
            v = getattr(self, name)
            if v is None or (isinstance(v, float) and not math.isfinite(v)):
                # blank: centralized rows have no k; a cell with every repeat excluded has no MSE
                cells.append("")
            elif isinstance(v, float):
                cells.append(repr(v))
            else:
                cells.append(str(v))
        return cells

    def key(self):
        return (self.estimator, self.k, self.N)


@dataclass
class ExperimentReport:
    rows: list = field(default_factory=list)
    configs: list = field(default_factory=list)
    # per (N, k): protocol deliveries, for failure-rate checks
    failure_stats: list = field(default_factory=list)
    # per (N, k): plug-in sandwich covariance at theta1
    sandwich_stats: list = field(default_factory=list)
    # raw squared errors per (estimator, k, N), repeat order
    squared_errors: dict = field(default_factory=dict)

    def row(self, estimator, k=None, N=None):
        for r in self.rows:
            if r.estimator == estimator and r.k == k and (N is None or r.N == N):
                return r
        raise KeyError((estimator, k, N))

    def mse(self, estimator, k=None, N=None):
        return self.row(estimator, k, N).mse_mean

    def empirical_failure_rate(self):
        attempts = sum(f["attempts"] for f in self.failure_stats)
        dropped = sum(f["dropped_round1"] + f["dropped_round2"] for f in self.failure_stats)
        return dropped / (2 * attempts) if attempts else 0.0

    def metadata(self):
        return {
            "configs": self.configs,
            "std_convention": STD_CONVENTION,
            "failure_stats": self.failure_stats,
            "sandwich_stats": self.sandwich_stats,
        }

    def deterministic_view(self):
        """Everything except wall times, for reproducibility comparisons."""
        rows = [{k: v for k, v in asdict(r).items() if k != "wall_ms"} for r in self.rows]
        return {"rows": rows, "metadata": self.metadata()}


def merge_reports(reports):
    out = ExperimentReport()
    for rep in reports:
        out.rows.extend(rep.rows)
        out.configs.extend(rep.configs)
        out.failure_stats.extend(rep.failure_stats)
        out.sandwich_stats.extend(rep.sandwich_stats)
        out.squared_errors.update(rep.squared_errors)
    return out


def _sq_err(theta, truth):
    diff = np.asarray(theta, dtype=float) - truth
    return float(diff @ diff)


def run_experiment(config: ExperimentConfig, progress=None) -> ExperimentReport:
    """Run every repeat of ``config``; ill-conditioning warnings are counted into the report metadata."""
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ConditioningWarning)
        report = _run(config, progress)
    report.configs[0]["ill_conditioned_solves"] = sum(issubclass(w.category, ConditioningWarning) for w in caught)
    for w in caught:
        if not issubclass(w.category, ConditioningWarning):
            warnings.warn_explicit(w.message, w.category, w.filename, w.lineno)
    return report


def _run(config, progress):
    model = make_model(config.kind, config.dim)
    wanted = set(config.estimators)
    errors = {(e, k): [] for e in config.estimators if e in DISTRIBUTED for k in config.k_grid}
    errors.update({(e, None): [] for e in config.estimators if e in POOLED})
    wall = {key: 0.0 for key in errors}
    fstats = {k: {"N": config.n, "k": k, "attempts": 0, "dropped_round1": 0, "dropped_round2": 0} for k in config.k_grid}
    sstats = {k: {"N": config.n, "k": k, "trace_mean": 0.0, "min_eigenvalue": math.inf, "count": 0} for k in config.k_grid}
    resample_wanted = "resampled_avg" in wanted
    any_distributed = bool(wanted & set(DISTRIBUTED))

    for rep in range(config.repeats):
        theta_true, samples = generate(GeneratorSpec(config.kind, config.n, config.seed, config.dim, repeat=rep))
        if "centralized" in wanted:
            t0 = time.perf_counter()
            res = m_estimate(model, samples)
            wall["centralized", None] += time.perf_counter() - t0
            errors["centralized", None].append(_sq_err(res.theta_hat, theta_true))
        if "centralized_partial" in wanted:
            keep = int(math.floor((1.0 - config.failure_rate) * config.n))
            idx = np.sort(rng_stream(config.seed, "partial", rep).choice(config.n, size=keep, replace=False))
            t0 = time.perf_counter()
            res = m_estimate(model, samples.take(idx))
            wall["centralized_partial", None] += time.perf_counter() - t0
            errors["centralized_partial", None].append(_sq_err(res.theta_hat, theta_true))
        if not any_distributed:
            continue
        for k in config.k_grid:
            shards = shard_split(samples, k, config.seed, key=(rep,))
            failure = FailurePolicy(config.failure_rate, config.per_round_failures, config.seed, key=(rep,))
            resample = Resampling(config.resample_ratio, config.seed, key=(rep, k)) if resample_wanted else None
            t0 = time.perf_counter()
            try:
                result = run_protocol(model, shards, failure, config.transport, resample)
            except (AllMachinesFailed, OneStepError) as exc:
                log.warning("repeat %d, k=%d excluded: %s", rep, k, exc)
                continue
            elapsed = time.perf_counter() - t0
            fs = fstats[k]
            fs["attempts"] += k
            fs["dropped_round1"] += result.dropped(1)
            fs["dropped_round2"] += result.dropped(2)
            found = {"simple_avg": result.theta0, "one_step": result.theta1, "resampled_avg": result.theta_resampled}
            for est, theta in found.items():
                if est in wanted and theta is not None:
                    errors[est, k].append(_sq_err(theta, theta_true))
                    wall[est, k] += elapsed
            if config.sandwich and "one_step" in wanted:
                try:
                    cov = sandwich_covariance(model, samples, result.theta1)
                except OneStepError as exc:
                    log.warning("sandwich covariance unavailable (repeat %d, k=%d): %s", rep, k, exc)
                else:
                    ss = sstats[k]
                    ss["count"] += 1
                    ss["trace_mean"] += (cov.trace() - ss["trace_mean"]) / ss["count"]
                    ss["min_eigenvalue"] = min(ss["min_eigenvalue"], cov.min_eigenvalue())
        if progress is not None:
            progress(rep + 1, config.repeats)

    report = ExperimentReport(configs=[config.echo()])
    report.failure_stats = [fstats[k] for k in config.k_grid] if any_distributed else []
    report.sandwich_stats = [
        sstats[k] for k in config.k_grid if config.sandwich and "one_step" in wanted and sstats[k]["count"]
    ]
    d = model.dim
    for est in config.estimators:
        keys = [None] if est in POOLED else list(config.k_grid)
        for k in keys:
            vals = errors[est, k]
            report.squared_errors[est, k, config.n] = vals
            if vals:
                summ = summarize(vals)
                mean, std = summ.mean, summ.std
            else:
                mean = std = math.nan
            report.rows.append(
                ReportRow(
                    estimator=est,
                    k=k,
                    N=config.n,
                    d=d,
                    K=config.repeats,
                    r=config.failure_rate,
                    s=config.resample_ratio,
                    mse_mean=mean,
                    mse_std=std,
                    failures_excluded=config.repeats - len(vals),
                    seed=config.seed,
                    wall_ms=round(wall[est, k] * 1000.0, 3),
                )
            )
    return report


def report_to_csv(report):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in report.rows:
        writer.writerow(row.csv_cells())
    return buf.getvalue()


def _finite_or_null(obj):
    # JSON has no NaN; empty cells (every repeat excluded) become null
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _finite_or_null(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite_or_null(v) for v in obj]
    return obj


def report_to_json(report):
    rows = [{name: getattr(r, name) for name in CSV_COLUMNS} for r in report.rows]
    doc = _finite_or_null({"metadata": report.metadata(), "rows": rows})
    return json.dumps(doc, indent=2, allow_nan=False) + "\n"


def write_report(report, path, fmt="csv"):
    if fmt not in ("csv", "json"):
        raise DomainError(f"report format must be csv or json, not {fmt!r}")
    text = report_to_csv(report) if fmt == "csv" else report_to_json(report)
    with open(path, "w", newline="") as fh:
        fh.write(text)


_CASTS = {
    "estimator": str,
    "k": lambda v: int(v) if v != "" else None,
    "N": int,
    "d": int,
    "K": int,
    "r": float,
    "s": float,
    "mse_mean": lambda v: float(v) if v != "" else math.nan,
    "mse_std": lambda v: float(v) if v != "" else math.nan,
    "failures_excluded": int,
    "seed": int,
    "wall_ms": float,
}


def read_report_csv(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise DomainError(f"unexpected report columns {reader.fieldnames}")
        return [ReportRow(**{name: _CASTS[name](row[name]) for name in CSV_COLUMNS}) for row in reader]


class CheckResult(NamedTuple):
    name: str
    passed: bool
    detail: str


def _ratio_check(name, num, den, bound, upper=True):
    ratio = num / den if den > 0 else math.inf
    ok = ratio <= bound if upper else ratio >= bound
    rel = "<=" if upper else ">="
    return CheckResult(name, bool(ok), f"ratio {ratio:.4g} (need {rel} {bound})")


def check_one_step_matches_centralized(report, k_max, bound=1.15, N=None):
    """mse(one_step, k) / mse(centralized) <= bound for every k <= k_max."""
    out = []
    central = report.mse("centralized", None, N)
    for row in report.rows:
        if row.estimator == "one_step" and row.k <= k_max and (N is None or row.N == N):
            out.append(_ratio_check(f"one_step/centralized k={row.k} N={row.N}", row.mse_mean, central, bound))
    return out


def check_simple_over_one_step(report, k, bound, N=None):
    return [
        _ratio_check(
            f"simple_avg/one_step k={k} N={report.row('one_step', k, N).N}",
            report.mse("simple_avg", k, N),
            report.mse("one_step", k, N),
            bound,
            upper=False,
        )
    ]


def check_resampled_between(report, k_min, N=None):
    """simple_avg >= resampled_avg >= one_step for every k >= k_min."""
    out = []
    for row in report.rows:
        if row.estimator == "resampled_avg" and row.k >= k_min and (N is None or row.N == N):
            lo = report.mse("one_step", row.k, row.N)
            hi = report.mse("simple_avg", row.k, row.N)
            ok = lo <= row.mse_mean <= hi
            out.append(
                CheckResult(
                    f"one_step <= resampled_avg <= simple_avg k={row.k}",
                    bool(ok),
                    f"{lo:.4g} <= {row.mse_mean:.4g} <= {hi:.4g}",
                )
            )
    return out


def check_simple_monotone(report, k_min, slack=0.05, inversions=1):
    """simple_avg MSE nondecreasing in k from k_min, allowing a few small dips."""
    rows = sorted((r for r in report.rows if r.estimator == "simple_avg" and r.k >= k_min), key=lambda r: r.k)
    dips = [(a.k, b.k) for a, b in zip(rows, rows[1:]) if b.mse_mean < a.mse_mean]
    deep = [(a.k, b.k) for a, b in zip(rows, rows[1:]) if b.mse_mean < (1.0 - slack) * a.mse_mean]
    ok = len(dips) <= inversions and not deep
    return [CheckResult(f"simple_avg nondecreasing for k >= {k_min}", ok, f"inversions {dips}")]


def check_failure_model(report, k, bound=1.25, rate=None, tol=0.01):
    out = [
        _ratio_check(
            f"one_step/centralized_partial k={k}",
            report.mse("one_step", k),
            report.mse("centralized_partial"),
            bound,
        )
    ]
    if rate is not None:
        emp = report.empirical_failure_rate()
        out.append(CheckResult("empirical failure rate", abs(emp - rate) <= tol, f"{emp:.4f} vs {rate} +/- {tol}"))
    return out


def check_sandwich_psd(report):
    worst = min((s["min_eigenvalue"] for s in report.sandwich_stats), default=0.0)
    return [CheckResult("sandwich covariance PSD", worst >= 0.0, f"smallest eigenvalue {worst:.3g}")]


@dataclass(frozen=True)
class Preset:
    name: str
    configs: tuple
    # report -> list of CheckResult
    checks: Optional[object] = None
    description: str = ""

    def run(self, progress=None):
        report = merge_reports(run_experiment(c, progress) for c in self.configs)
        results = list(self.checks(report)) if self.checks is not None else []
        return report, results


TABLE3_ESTIMATORS = ("simple_avg", "resampled_avg", "one_step", "centralized")
TABLE4_ESTIMATORS = ("simple_avg", "one_step", "centralized", "centralized_partial")
LOGISTIC_ESTIMATORS = ("simple_avg", "one_step", "centralized")


def _logistic_checks(report):
    return check_one_step_matches_centralized(report, 128) + check_simple_over_one_step(report, 128, 1.0)


def _table3_checks(report):
    return (
        check_one_step_matches_centralized(report, 64)
        + check_simple_over_one_step(report, 256, 10.0)
        + check_resampled_between(report, 64)
        + check_simple_monotone(report, 16)
        + check_sandwich_psd(report)
    )


def _table4_checks(k_max):
    def checks(report):
        return check_failure_model(report, k_max, 1.25, 0.05) + check_sandwich_psd(report)

    return checks


def _table5_checks(n_max):
    def checks(report):
        out = []
        for p in range(5, 10):
            N = 4**p
            if N <= n_max:
                out += check_one_step_matches_centralized(report, 2**p, 1.10, N=N)
        return out + check_simple_over_one_step(report, 128, 1.8, N=4**7) + check_sandwich_psd(report)

    return checks


def _desk_checks(report):
    return (
        check_one_step_matches_centralized(report, 16)
        + check_simple_over_one_step(report, 32, 1.0)
        + check_sandwich_psd(report)
    )


def _gaussian_configs(powers, name):
    return tuple(
        ExperimentConfig("gaussian", 4**p, (2**p,), estimators=TABLE3_ESTIMATORS, name=name) for p in powers
    )


PRESETS = {
    p.name: p
    for p in (
        Preset(
            "table1",
            (ExperimentConfig("logistic", 2**17, (2, 4, 8, 16, 32, 64, 128), dim=20, estimators=LOGISTIC_ESTIMATORS, name="table1"),),
            _logistic_checks,
            "logistic regression, d=20, N=2^17",
        ),
        Preset(
            "table2",
            (ExperimentConfig("logistic", 2**17, (2, 4, 8, 16, 32, 64, 128), dim=100, estimators=LOGISTIC_ESTIMATORS, name="table2"),),
            _logistic_checks,
            "logistic regression, d=100, N=2^17",
        ),
        Preset(
            "table3",
            (ExperimentConfig("beta", 2**13, tuple(2**j for j in range(1, 9)), estimators=TABLE3_ESTIMATORS, name="table3"),),
            _table3_checks,
            "Beta(alpha, beta), N=2^13, k up to 256",
        ),
        Preset(
            "table4",
            (
                ExperimentConfig(
                    "beta", 409600, tuple(2**j for j in range(3, 10)), estimators=TABLE4_ESTIMATORS, failure_rate=0.05, name="table4"
                ),
            ),
            _table4_checks(512),
            "Beta with machine failures, N=409600, r=0.05",
        ),
        Preset(
            "table4-scaled",
            (
                ExperimentConfig(
                    "beta", 51200, tuple(2**j for j in range(3, 8)), estimators=TABLE4_ESTIMATORS, failure_rate=0.05, name="table4-scaled"
                ),
            ),
            _table4_checks(128),
            "Beta with machine failures, N=51200, r=0.05, k up to 128",
        ),
        Preset("table5", _gaussian_configs(range(3, 10), "table5"), _table5_checks(4**9), "Gaussian, k=sqrt(N), N=4^3..4^9"),
        Preset(
            "table5-scaled",
            _gaussian_configs(range(3, 8), "table5-scaled"),
            _table5_checks(4**7),
            "Gaussian, k=sqrt(N), N=4^3..4^7",
        ),
        Preset(
            "desk",
            (ExperimentConfig("beta", 512, (2, 4, 8, 16, 32), repeats=20, estimators=TABLE3_ESTIMATORS, name="desk"),),
            _desk_checks,
            "Beta, N=512, K=20: the Beta table at 1/16 scale",
        ),
    )
}
