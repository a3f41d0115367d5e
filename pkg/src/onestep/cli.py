"""Command-line entry point: ``onestep {generate,run,experiment,worker,coordinator}``.

Exit status is 0 on success, 2 when a flag or an input file fails
validation, and 1 on a runtime failure (including a failed preset check).
"""

import argparse
import logging
import sys

import numpy as np

from . import __version__
from .cluster.protocol import FailurePolicy, Resampling, coordinate, run_protocol
from .cluster.transport import TcpTransport, serve_worker
from .cluster.worker import Worker
from .data import GeneratorSpec, generate, read_samples_csv, shard_split, write_samples_csv
from .errors import (
    DimensionMismatch,
    DomainError,
    EmptyInput,
    IndivisibleSplit,
    MalformedRow,
    NonFiniteInput,
    OneStepError,
)
from .experiment import PRESETS, write_report
from .model import make_model
from .solver import m_estimate

log = logging.getLogger("onestep")

MODELS = ("logistic", "beta", "gaussian", "gaussian_mean")
VALIDATION_ERRORS = (DomainError, DimensionMismatch, IndivisibleSplit, MalformedRow, NonFiniteInput, EmptyInput)


class UsageError(Exception):
    pass


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _seed(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def _rate(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not 0.0 <= v < 1.0:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1), got {v}")
    return v


def _ratio(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError(f"must lie in (0, 1), got {v}")
    return v


def _positive_float(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {v}")
    return v


def _endpoint(text):
    host, sep, port = text.rpartition(":")
    if not sep or not host:
        raise argparse.ArgumentTypeError(f"expected HOST:PORT, got {text!r}")
    try:
        p = int(port)
    except ValueError:
        raise argparse.ArgumentTypeError(f"port must be an integer, got {port!r}") from None
    if not 0 <= p <= 65535:
        raise argparse.ArgumentTypeError(f"port must lie in [0, 65535], got {p}")
    return host, p


def fmt(v):
    return f"{float(v):.6g}"


def fmt_vec(a):
    return "[" + ", ".join(fmt(v) for v in np.asarray(a, dtype=float).reshape(-1)) + "]"


def _model_flags(p, required=True):
    p.add_argument("--model", choices=MODELS, required=required, help="criterion model")
    p.add_argument("--d", type=_positive_int, default=None, help="predictor dimension (logistic only; 20 when omitted)")


class _Help(argparse.ArgumentDefaultsHelpFormatter):
    # None defaults are described in the help text itself
    def _get_help_string(self, action):
        if action.default is None:
            return action.help
        return super()._get_help_string(action)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="onestep",
        description="Distributed one-step M-estimation: data generation, protocol runs and experiments.",
        formatter_class=_Help,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    parser.commands = sub.choices
    fmt_class = _Help

    p = sub.add_parser("generate", help="draw a synthetic data set and write it as CSV", formatter_class=fmt_class)
    _model_flags(p)
    p.add_argument("--n", type=_positive_int, required=True, help="number of samples N")
    p.add_argument("--seed", type=_seed, default=0, help="master seed")
    p.add_argument("--out", default=None, help="output CSV path; {model}_{seed}.csv when omitted")

    p = sub.add_parser("run", help="one protocol run: simple average, one-step and centralized estimates", formatter_class=fmt_class)
    _model_flags(p)
    p.add_argument("--n", type=_positive_int, default=None, help="number of samples N to generate (ignored with --data)")
    p.add_argument("--data", default=None, help="read samples from this CSV instead of generating them")
    p.add_argument("--k", type=_positive_int, required=True, help="number of machines; must divide N")
    p.add_argument("--r", type=_rate, default=0.0, help="per-machine failure rate")
    p.add_argument("--per-round", action="store_true", help="draw failures independently in each round")
    p.add_argument("--s", type=_ratio, default=None, help="also compute the resampled average with this ratio")
    p.add_argument("--transport", choices=("inproc", "tcp"), default="inproc", help="message transport")
    p.add_argument("--seed", type=_seed, default=0, help="master seed")

    p = sub.add_parser("experiment", help="run a preset experiment and write its report", formatter_class=fmt_class)
    p.add_argument("--preset", choices=sorted(PRESETS), required=True, help="experiment preset")
    p.add_argument("--out", default=None, help="report path; {preset}.{format} when omitted")
    p.add_argument("--format", choices=("csv", "json"), default="csv", help="report format")
    p.add_argument("--no-checks", action="store_true", help="skip the checks embedded in the preset")

    p = sub.add_parser("coordinator", help="coordinate k TCP workers through both protocol rounds", formatter_class=fmt_class)
    p.add_argument("--listen", type=_endpoint, required=True, help="HOST:PORT to accept workers on")
    p.add_argument("--k", type=_positive_int, required=True, help="number of workers; ids 1..k")
    _model_flags(p)
    p.add_argument("--r", type=_rate, default=0.0, help="per-machine failure rate")
    p.add_argument("--per-round", action="store_true", help="draw failures independently in each round")
    p.add_argument("--s", type=_ratio, default=None, help="also compute the resampled average with this ratio")
    p.add_argument("--seed", type=_seed, default=0, help="master seed")
    p.add_argument("--timeout", type=_positive_float, default=120.0, help="seconds to wait for any worker")

    p = sub.add_parser("worker", help="serve one shard to a coordinator", formatter_class=fmt_class)
    p.add_argument("--connect", type=_endpoint, required=True, help="coordinator HOST:PORT")
    p.add_argument("--machine-id", type=_positive_int, required=True, help="this worker's id, 1..k")
    p.add_argument("--data", required=True, help="CSV file with this worker's shard")
    p.add_argument("--timeout", type=_positive_float, default=120.0, help="socket timeout in seconds")
    return parser


def _model(args):
    if args.d is not None and args.model != "logistic":
        raise UsageError(f"--d: only the logistic model has a free dimension (got --model {args.model})")
    return make_model(args.model, args.d)


def _print_result(result, model, theta_true=None, central=None, resampled=False):
    def line(label, theta, score=True):
        err = ""
        if score and theta_true is not None and theta is not None:
            diff = np.asarray(theta) - theta_true
            err = f"  sq_err {fmt(diff @ diff)}"
        print(f"{label:<14}{fmt_vec(theta) if theta is not None else 'n/a'}{err}")

    print(f"parameters    {', '.join(model.param_names) if model.param_names else model.dim}")
    if theta_true is not None:
        line("theta_true", theta_true, score=False)
    line("simple_avg", result.theta0)
    if resampled:
        line("resampled_avg", result.theta_resampled)
    line("one_step", result.theta1)
    if central is not None:
        line("centralized", central)
    k = len(result.machine_ids)
    print(f"delivered     round1 {k - result.dropped(1)}/{k}  round2 {k - result.dropped(2)}/{k}")


def cmd_generate(args):
    model = _model(args)
    theta, samples = generate(GeneratorSpec(args.model, args.n, args.seed, model.dim if args.model == "logistic" else None))
    out = args.out or f"{args.model}_{args.seed}.csv"
    write_samples_csv(out, samples)
    print(f"wrote {len(samples)} samples to {out}")
    print(f"theta_true    {fmt_vec(theta)}")
    return 0


def cmd_run(args):
    model = _model(args)
    if args.data is not None:
        if args.n is not None:
            raise UsageError("--n: give either --n or --data, not both")
        samples = read_samples_csv(args.data, kind=args.model)
        theta_true = None
    else:
        if args.n is None:
            raise UsageError("--n: required unless --data is given")
        dim = model.dim if args.model == "logistic" else None
        theta_true, samples = generate(GeneratorSpec(args.model, args.n, args.seed, dim))
    model.check_samples(samples)
    if len(samples) % args.k:
        raise UsageError(f"--k: {args.k} does not divide N={len(samples)}")
    shards = shard_split(samples, args.k, args.seed)
    failure = FailurePolicy(args.r, args.per_round, args.seed)
    resample = Resampling(args.s, args.seed) if args.s is not None else None
    result = run_protocol(model, shards, failure, args.transport, resample)
    central = m_estimate(model, samples).theta_hat
    print(f"model {args.model}  N={len(samples)}  k={args.k}  r={fmt(args.r)}  seed={args.seed}  transport={args.transport}")
    _print_result(result, model, theta_true, central, resampled=resample is not None)
    return 0


def cmd_experiment(args):
    preset = PRESETS[args.preset]
    out = args.out or f"{args.preset}.{args.format}"

    def progress(done, total):
        log.info("%s: repeat %d/%d", args.preset, done, total)

    report, checks = preset.run(progress)
    if args.no_checks:
        checks = []
    write_report(report, out, args.format)
    print(f"preset {preset.name}: {preset.description}")
    print(f"{'estimator':<20}{'N':>8}{'k':>6}{'mse_mean':>14}{'mse_std':>14}{'excluded':>10}")
    for row in report.rows:
        k = "-" if row.k is None else str(row.k)
        print(f"{row.estimator:<20}{row.N:>8}{k:>6}{fmt(row.mse_mean):>14}{fmt(row.mse_std):>14}{row.failures_excluded:>10}")
    failed = 0
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name}: {c.detail}")
        failed += not c.passed
    print(f"wrote {len(report.rows)} rows to {out}")
    if failed:
        print(f"{failed} of {len(checks)} checks failed", file=sys.stderr)
        return 1
    return 0


def cmd_coordinator(args):
    model = _model(args)
    host, port = args.listen
    ids = list(range(1, args.k + 1))
    failure = FailurePolicy(args.r, args.per_round, args.seed)
    resample = Resampling(args.s, args.seed) if args.s is not None else None
    transport = TcpTransport(host, port, timeout=args.timeout)
    try:
        bound = transport.address
        print(f"listening on {bound[0]}:{bound[1]} for {args.k} workers", file=sys.stderr, flush=True)
        transport.accept(ids)
        result = coordinate(transport, ids, model, failure, resample)
    finally:
        transport.close()
    _print_result(result, model, resampled=resample is not None)
    return 0


def cmd_worker(args):
    samples = read_samples_csv(args.data)
    serve_worker(args.connect, Worker(args.machine_id, samples), timeout=args.timeout)
    log.info("machine %d done", args.machine_id)
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "run": cmd_run,
    "experiment": cmd_experiment,
    "coordinator": cmd_coordinator,
    "worker": cmd_worker,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.commands[args.command].error(str(exc))
    except VALIDATION_ERRORS as exc:
        print(f"onestep {args.command}: invalid input: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"onestep {args.command}: {exc}", file=sys.stderr)
        return 2
    except (OneStepError, OSError) as exc:
        print(f"onestep {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
