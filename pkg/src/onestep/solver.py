"""Local and centralized M-estimation by safeguarded Newton ascent."""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import Diverged, DomainError, EmptyShard, NonFiniteInput, NotDefinite
from .linalg import RIDGE_LADDER, newton_increment
from .model import Samples, _samples_of, shard_criterion

_EPS = np.finfo(float).eps


@dataclass(frozen=True)
class SolveConfig:
    max_iters: int = 100
    grad_tol: float = 1e-10
    step_shrink: float = 0.5
    min_step: float = 1e-12
    # a converged iterate must also have a small Newton increment; this is
    # what separates a true maximizer from a criterion that only flattens
    # out at infinity (separable logistic data)
    step_tol: float = 1e-6
    # below this gradient size an exhausted line search is a numerical
    # stall, above it the ascent has failed
    stall_tol: float = 1e-6
    ridge_ladder: tuple = RIDGE_LADDER

    def __post_init__(self):
        if self.max_iters < 1:
            raise DomainError("max_iters must be >= 1")
        if not 0 < self.grad_tol < 1:
            raise DomainError("grad_tol must be in (0, 1)")
        if not 0 < self.step_shrink < 1:
            raise DomainError("step_shrink must be in (0, 1)")
        if not 0 < self.min_step < 1:
            raise DomainError("min_step must be in (0, 1)")
        if not (self.step_tol > 0 and self.stall_tol > 0):
            raise DomainError("step_tol and stall_tol must be positive")


DEFAULT_CONFIG = SolveConfig()


@dataclass
class SolveResult:
    theta_hat: np.ndarray
    iterations: int
    final_grad_norm: float
    converged: bool
    hessian_at_opt: np.ndarray
    status: str = "converged"
    value: float = float("nan")
    # criterion value at every accepted iterate, starting point included; the
    # final refinement step after the convergence test is recorded here but
    # not counted in ``iterations``
    values: list = field(default_factory=list)


def _direction(model, theta, grad, hess, ladder):
    """Ascent direction in free coordinates, plus the Newton increment if any."""
    g, h = model.free_derivatives(theta, grad, hess)
    try:
        inc = newton_increment(h, g, ladder)
    except NotDefinite:
        diag = np.abs(np.diag(h))
        floor = max(1e-12 * float(np.max(diag, initial=0.0)), 1e-300)
        return g / np.maximum(diag, floor), None
    return -inc, inc


def _polish(model, samples, eta, value, grad_tol):
    theta = model.from_free(eta)
    if not model.in_domain(theta):
        return None
    try:
        full = shard_criterion(model, samples, theta)
    except NonFiniteInput:
        return None
    if full[0] < value - 32 * _EPS * (1.0 + abs(value)) or float(np.max(np.abs(full[1]))) > grad_tol:
        return None
    return eta, theta, full


def m_estimate(model, shard, init=None, config: Optional[SolveConfig] = None):
    """Maximize the mean criterion of ``model`` over ``shard``.

    Returns a :class:`SolveResult`; running out of iterations or stalling
    near the optimum yields ``converged=False`` with the best iterate.
    Raises :class:`Diverged` when no ascent step exists although the
    gradient is still large.
    """
    config = config or DEFAULT_CONFIG
    samples = _samples_of(shard)
    if len(samples) == 0:
        raise EmptyShard("cannot estimate on an empty shard")
    model.check_estimable(samples)
    theta = model.check_theta(model.default_init(samples) if init is None else init)
    eta = model.to_free(theta)
    value, grad, hess = shard_criterion(model, samples, theta)
    values = [value]
    iterations = 0
    status = "max_iters"
    while True:
        direction, inc = _direction(model, theta, grad, hess, config.ridge_ladder)
        gnorm = float(np.max(np.abs(grad)))
        if (
            gnorm <= config.grad_tol
            and inc is not None
            and float(np.max(np.abs(inc))) <= config.step_tol * (1.0 + float(np.max(np.abs(eta))))
        ):
            status = "converged"
            # apply the increment already in hand; it squares the remaining error
            if float(np.max(np.abs(inc))) > 4 * _EPS * (1.0 + float(np.max(np.abs(eta)))):
                polished = _polish(model, samples, eta - inc, value, config.grad_tol)
                if polished is not None:
                    eta, theta, (value, grad, hess) = polished
                    values.append(value)
            break
        if iterations >= config.max_iters:
            break
        step = 1.0
        accepted = None
        noise = 32 * _EPS * (1.0 + abs(value))
        while step >= config.min_step:
            # eta - 1.0 * inc is bit-identical to eta - inc
            eta_try = eta - step * inc if inc is not None else eta + step * direction
            theta_try = model.from_free(eta_try)
            if model.in_domain(theta_try):
                try:
                    v_try, _, _ = shard_criterion(model, samples, theta_try, order=0)
                    if v_try > value:
                        accepted = (eta_try, theta_try, None)
                        break
                    if v_try >= value - noise:
                        # flat to rounding: accept only if the gradient shrinks
                        full = shard_criterion(model, samples, theta_try)
                        if float(np.max(np.abs(full[1]))) < gnorm:
                            accepted = (eta_try, theta_try, full)
                            break
                except NonFiniteInput:
                    pass
            step *= config.step_shrink
        if accepted is None:
            if gnorm <= config.stall_tol:
                status = "stalled"
                break
            raise Diverged(
                f"{model.name}: no ascent step from theta={theta} (gradient norm {gnorm:.3g})"
            )
        eta, theta, full = accepted
        value, grad, hess = full if full is not None else shard_criterion(model, samples, theta)
        values.append(value)
        iterations += 1
    return SolveResult(
        theta_hat=theta,
        iterations=iterations,
        final_grad_norm=float(np.max(np.abs(grad))),
        converged=status == "converged",
        hessian_at_opt=hess,
        status=status,
        value=value,
        values=values,
    )


def pool(shards):
    """Concatenate the samples of ``shards`` in the order given."""
    parts = [_samples_of(s) for s in shards]
    return parts[0] if len(parts) == 1 else Samples.concat(parts)


def centralized_estimate(model, shards, init=None, config: Optional[SolveConfig] = None):
    """The oracle M-estimator on all samples of all shards pooled."""
    return m_estimate(model, pool(shards), init, config)
