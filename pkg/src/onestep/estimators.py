"""Aggregation arithmetic run by the central machine.

All reductions walk the delivered machines in ascending ``machine_id`` order
and accumulate with compensated sums, so the result does not depend on the
order in which reports arrived.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import AllMachinesFailed, DimensionMismatch, DomainError, NonFiniteInput
from .linalg import compensated_sum, newton_increment, solve_definite
from .model import _samples_of, shard_criterion


@dataclass(frozen=True)
class LocalReport:
    """What one machine contributed in a round; ``delivered`` is a_i."""

    machine_id: int
    theta: Optional[np.ndarray] = None
    grad: Optional[np.ndarray] = None
    hess: Optional[np.ndarray] = None
    delivered: bool = True


class AggregationInput:
    def __init__(self, reports):
        reports = sorted(reports, key=lambda r: r.machine_id)
        ids = [r.machine_id for r in reports]
        if len(set(ids)) != len(ids):
            raise DomainError(f"duplicate machine ids in {ids}")
        self.reports = tuple(reports)

    @classmethod
    def from_lists(cls, thetas=None, grads=None, hessians=None, mask=None, machine_ids=None):
        """Build an input from parallel lists; machine ids default to 1..k."""
        k = len(next(x for x in (thetas, grads, hessians, mask) if x is not None))
        ids = list(machine_ids) if machine_ids is not None else list(range(1, k + 1))
        mask = [1] * k if mask is None else list(mask)

        def pick(seq, i):
            return None if seq is None else np.asarray(seq[i], dtype=float)

        return cls(
            LocalReport(ids[i], pick(thetas, i), pick(grads, i), pick(hessians, i), bool(mask[i]))
            for i in range(k)
        )

    @property
    def mask(self):
        return tuple(int(r.delivered) for r in self.reports)

    def delivered(self):
        return [r for r in self.reports if r.delivered]


def _ordered_mean(arrays):
    """Compensated mean, shifted by the first term so equal inputs come back exactly."""
    first = arrays[0]
    if len(arrays) == 1:
        return first.copy()
    if any(a.shape != first.shape for a in arrays):
        raise DimensionMismatch("machines reported arrays of different shapes")
    stacked = np.stack(arrays)
    shape = stacked.shape[1:]
    if not np.all(np.isfinite(stacked)):
        raise NonFiniteInput("a delivered summary has non-finite entries")
    diffs = (stacked - first).reshape(len(arrays), -1)
    return first + (compensated_sum(diffs) / len(arrays)).reshape(shape)


def _delivered_field(inputs, name, round_=None):
    got = [getattr(r, name) for r in inputs.delivered()]
    if not got:
        raise AllMachinesFailed(round_)
    if any(g is None for g in got):
        raise DomainError(f"a delivered report lacks its {name}")
    return [np.asarray(g, dtype=float) for g in got]


def simple_average(inputs: AggregationInput):
    """Mean of the delivered local estimates."""
    return _ordered_mean(_delivered_field(inputs, "theta", 1))


def resampled_average(theta0, theta0_sub, s):
    """Bias-corrected average ``(theta0 - s * theta0_sub) / (1 - s)``."""
    if not 0.0 < s < 1.0:
        raise DomainError(f"resampling ratio must lie in (0, 1), got {s}")
    theta0 = np.asarray(theta0, dtype=float)
    theta0_sub = np.asarray(theta0_sub, dtype=float)
    return (theta0 - s * theta0_sub) / (1.0 - s)


def aggregate_grad_hess(inputs: AggregationInput):
    """Averaged gradient and Hessian over the machines that delivered them."""
    grad = _ordered_mean(_delivered_field(inputs, "grad", 2))
    hess = _ordered_mean(_delivered_field(inputs, "hess", 2))
    return grad, hess


def one_step_update(start, inputs: AggregationInput):
    """Single Newton-Raphson update of ``start`` from delivered gradients and Hessians.

    ``start`` can be any finite estimate; the gradients and Hessians in
    ``inputs`` must have been evaluated at it.
    """
    start = np.asarray(start, dtype=float)
    if not np.all(np.isfinite(start)):
        raise NonFiniteInput("one-step start is not finite")
    grad, hess = aggregate_grad_hess(inputs)
    if grad.shape != start.shape:
        raise DimensionMismatch(f"gradient has shape {grad.shape}, start {start.shape}")
    return start - newton_increment(hess, grad)


@dataclass(frozen=True)
class SandwichCovariance:
    sigma: np.ndarray
    score_outer: np.ndarray
    bread: np.ndarray

    def trace(self):
        return float(np.trace(self.sigma))

    def min_eigenvalue(self):
        return float(np.linalg.eigvalsh(self.sigma)[0])


def score_outer_product(model, samples, theta, chunk=1 << 16):
    """Compensated mean of the per-sample score outer products."""
    samples = _samples_of(samples)
    theta = model.check_theta(theta)
    d = model.dim
    partials = []
    for start in range(0, len(samples), chunk):
        y = None if samples.y is None else samples.y[start:start + chunk]
        _, g, _ = model.terms(samples.x[start:start + chunk], y, theta, order=1)
        partials.append(compensated_sum((g[:, :, None] * g[:, None, :]).reshape(-1, d * d)))
    total = partials[0] if len(partials) == 1 else compensated_sum(np.stack(partials))
    return (total / len(samples)).reshape(d, d)


def sandwich_covariance(model, samples, theta):
    """Plug-in ``H^-1 S H^-1`` with H the mean Hessian and S the mean score outer product."""
    samples = _samples_of(samples)
    _, _, bread = shard_criterion(model, samples, theta)
    meat = score_outer_product(model, samples, theta)
    left, _ = solve_definite(bread, meat, "negative")
    sigma, _ = solve_definite(bread, left.T, "negative")
    sigma = 0.5 * (sigma + sigma.T)
    return SandwichCovariance(sigma=sigma, score_outer=meat, bread=bread)
