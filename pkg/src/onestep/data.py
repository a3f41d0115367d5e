"""Seeded synthetic data, shard splitting and CSV persistence.

Every random draw comes from a labeled sub-stream of the master seed, so
for instance switching failure injection on or off never perturbs the
generated data.
"""

import csv
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DomainError, IndivisibleSplit, MalformedRow
from .model import Samples

STREAMS = {
    "param": 0,
    "sample": 1,
    "shard": 2,
    "resample": 3,
    "failure": 4,
    "partial": 5,
}

KINDS = ("logistic", "beta", "gaussian", "gaussian_mean")
_BETA_RETRIES = 100


def rng_stream(seed, label, *key):
    """Independent Philox generator for ``(seed, label, *key)``."""
    spawn_key = (STREAMS[label],) + tuple(int(k) for k in key)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=spawn_key)))


@dataclass(frozen=True)
class GeneratorSpec:
    kind: str
    n: int
    seed: int = 0
    dim: Optional[int] = None
    # index of the repeat; each repeat draws a fresh parameter and data set
    repeat: int = 0
    # test hook: fix the true parameter instead of drawing it
    theta: Optional[tuple] = None
    # noise variance for the gaussian_mean model
    sigma2: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainError(f"unknown model kind {self.kind!r}; choose from {', '.join(KINDS)}")
        if self.n < 1:
            raise DomainError("sample count must be >= 1")
        if self.kind == "logistic" and (self.dim is None or self.dim < 1):
            raise DomainError("logistic data needs dim >= 1")


@dataclass(frozen=True, eq=False)
class Shard:
    machine_id: int
    samples: Samples

    def __len__(self):
        return len(self.samples)


def _draw_theta(spec, rng):
    if spec.kind == "logistic":
        return rng.uniform(-1.0, 1.0, size=spec.dim)
    if spec.kind == "beta":
        return rng.uniform(1.0, 3.0, size=2)
    if spec.kind == "gaussian":
        return np.array([rng.uniform(-2.0, 2.0), rng.uniform(0.25, 9.0)])
    return np.array([rng.uniform(-2.0, 2.0)])


def _beta_draws(a, b, n, rng):
    x = np.empty(n)
    todo = np.arange(n)
    for _ in range(_BETA_RETRIES):
        g1 = rng.standard_gamma(a, size=todo.shape[0])
        g2 = rng.standard_gamma(b, size=todo.shape[0])
        x[todo] = g1 / (g1 + g2)
        todo = todo[~((x[todo] > 0.0) & (x[todo] < 1.0))]
        if todo.shape[0] == 0:
            return x
    raise DomainError(f"could not draw Beta({a}, {b}) samples strictly inside (0, 1)")


def generate(spec: GeneratorSpec):
    """Draw the true parameter and ``spec.n`` i.i.d. samples.

    Returns ``(theta_true, samples)``.
    """
    if spec.theta is None:
        theta = _draw_theta(spec, rng_stream(spec.seed, "param", spec.repeat))
    else:
        theta = np.array(spec.theta, dtype=float)
    rng = rng_stream(spec.seed, "sample", spec.repeat)
    n = spec.n
    if spec.kind == "logistic":
        if theta.shape != (spec.dim,):
            raise DomainError(f"logistic theta must have length {spec.dim}")
        x = rng.uniform(-1.0, 1.0, size=(n, spec.dim))
        z = x @ theta
        p = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
        y = (rng.uniform(size=n) < p).astype(float)
        return theta, Samples(x, y)
    if spec.kind == "beta":
        if not (theta.shape == (2,) and np.all(theta > 0)):
            raise DomainError("beta theta must be two positive numbers")
        return theta, Samples(_beta_draws(theta[0], theta[1], n, rng))
    if spec.kind == "gaussian":
        if not (theta.shape == (2,) and theta[1] > 0):
            raise DomainError("gaussian theta must be (mu, sigma2 > 0)")
        return theta, Samples(theta[0] + math.sqrt(theta[1]) * rng.standard_normal(n))
    return theta, Samples(theta[0] + math.sqrt(spec.sigma2) * rng.standard_normal(n))


def shard_split(samples, k, seed, key=()):
    """Randomly permute ``samples`` and cut them into ``k`` equal shards.

    Machine ids run from 1 to ``k``.  ``key`` selects an independent
    permutation stream (the experiment passes ``(repeat,)``).
    """
    n_total = len(samples)
    if k < 1 or n_total % k:
        raise IndivisibleSplit(f"{n_total} samples cannot be split evenly across {k} machines")
    perm = rng_stream(seed, "shard", k, *key).permutation(n_total)
    n = n_total // k
    return [Shard(i + 1, samples.take(perm[i * n:(i + 1) * n])) for i in range(k)]


def _header(samples):
    width = samples.width
    names = ["x"] if width == 1 and samples.y is None else [f"x{j + 1}" for j in range(width)]
    if samples.y is not None:
        names.append("y")
    return names


def write_samples_csv(path, samples, width=None):
    """Write samples with a header row; floats use shortest round-trip repr."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_header(samples))
        has_y = samples.y is not None
        for i in range(len(samples)):
            row = [repr(float(v)) for v in samples.x[i]]
            if has_y:
                row.append(repr(float(samples.y[i])))
            writer.writerow(row)


def read_samples_csv(path, kind=None):
    """Read a file written by :func:`write_samples_csv`.

    With ``kind="beta"`` rows outside the open unit interval are rejected.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MalformedRow(1, "missing header row") from None
        has_y = bool(header) and header[-1] == "y"
        xcols = header[:-1] if has_y else header
        if not xcols or not (xcols == ["x"] or xcols == [f"x{j + 1}" for j in range(len(xcols))]):
            raise MalformedRow(1, f"unrecognized header {header}")
        width = len(xcols)
        rows = []
        for line, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise MalformedRow(line, f"expected {len(header)} fields, got {len(row)}")
            try:
                values = [float(v) for v in row]
            except ValueError as exc:
                raise MalformedRow(line, str(exc)) from None
            if not all(math.isfinite(v) for v in values):
                raise MalformedRow(line, "non-finite value")
            if kind == "beta" and not 0.0 < values[0] < 1.0:
                raise DomainError(f"line {line}: beta observation {values[0]!r} not in (0, 1)")
            rows.append(values)
    data = np.array(rows, dtype=float).reshape(len(rows), len(header))
    if has_y:
        return Samples(data[:, :width], data[:, width])
    return Samples(data[:, :width])
