"""Criterion functions m(x; theta) with analytic gradients and Hessians.

A model evaluates per-sample terms in a vectorized way; :func:`shard_criterion`
turns them into the local empirical criterion (value, gradient, Hessian)
by taking compensated means over a shard.
"""

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .errors import DimensionMismatch, DomainError, EmptyShard, NonFiniteInput
from .linalg import compensated_sum
from .special import digamma, trigamma

_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
# per-chunk budget of float64 entries when materializing per-sample terms
_CHUNK_ENTRIES = 1 << 21


class Sample(NamedTuple):
    x: np.ndarray
    y: Optional[float] = None


@dataclass(frozen=True, eq=False)
class Samples:
    """Struct-of-arrays sample container: ``x`` is (N, p), ``y`` is (N,) or None."""

    x: np.ndarray
    y: Optional[np.ndarray] = None

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2:
            raise DimensionMismatch(f"x must be 1-D or 2-D, got shape {x.shape}")
        object.__setattr__(self, "x", x)
        if self.y is not None:
            y = np.asarray(self.y, dtype=float).reshape(-1)
            if y.shape[0] != x.shape[0]:
                raise DimensionMismatch("x and y have different lengths")
            object.__setattr__(self, "y", y)

    def __len__(self):
        return self.x.shape[0]

    def __getitem__(self, i):
        return Sample(self.x[i], None if self.y is None else float(self.y[i]))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other):
        if not isinstance(other, Samples):
            return NotImplemented
        if (self.y is None) != (other.y is None):
            return False
        same_x = self.x.shape == other.x.shape and np.array_equal(self.x, other.x)
        return same_x and (self.y is None or np.array_equal(self.y, other.y))

    @property
    def width(self):
        return self.x.shape[1]

    def take(self, idx):
        idx = np.asarray(idx, dtype=np.intp)
        return Samples(self.x[idx], None if self.y is None else self.y[idx])

    @classmethod
    def from_list(cls, samples, width=None):
        samples = list(samples)
        if not samples:
            return cls(np.zeros((0, width or 1)), None)
        x = np.array([np.atleast_1d(np.asarray(s.x, dtype=float)) for s in samples])
        ys = [s.y for s in samples]
        y = None if ys[0] is None else np.array(ys, dtype=float)
        return cls(x, y)

    @classmethod
    def concat(cls, parts):
        parts = list(parts)
        x = np.concatenate([p.x for p in parts])
        y = None if parts[0].y is None else np.concatenate([p.y for p in parts])
        return cls(x, y)


def _samples_of(data):
    if isinstance(data, Samples):
        return data
    inner = getattr(data, "samples", None)
    if isinstance(inner, Samples):
        return inner
    if isinstance(data, Sample):
        return Samples.from_list([data])
    return Samples.from_list(data)


def _need_two_distinct(model, samples):
    # with a single distinct value the likelihood keeps rising toward the boundary
    col = _samples_of(samples).x[:, 0]
    if col.size < 2 or np.all(col == col[0]):
        raise DomainError(f"{model.name} estimate needs at least two distinct observations")


class CriterionModel:
    """Base class; subclasses implement :meth:`terms` and :meth:`default_init`.

    ``terms(x, y, theta, order)`` returns per-sample values ``(n,)`` and, for
    ``order >= 1`` / ``order == 2``, gradients ``(n, d)`` and Hessians
    ``(n, d, d)``.  The solver may work in a reparameterization given by
    :meth:`to_free` / :meth:`from_free`; the identity by default.
    """

    name = "abstract"
    dim = 0
    param_names = ()

    def spec(self):
        return {"kind": self.name}

    def in_domain(self, theta):
        return bool(np.all(np.isfinite(theta)))

    def check_theta(self, theta):
        theta = np.asarray(theta, dtype=float).reshape(-1)
        if theta.shape[0] != self.dim:
            raise DimensionMismatch(f"{self.name} expects {self.dim} parameters, got {theta.shape[0]}")
        if not np.all(np.isfinite(theta)):
            raise NonFiniteInput(f"non-finite parameter {theta}")
        if not self.in_domain(theta):
            raise DomainError(f"parameter {theta} outside the {self.name} domain")
        return theta

    def check_samples(self, samples):
        samples = _samples_of(samples)
        bad = ~np.all(np.isfinite(samples.x), axis=1)
        if samples.y is not None:
            bad |= ~np.isfinite(samples.y)
        if np.any(bad):
            raise NonFiniteInput(f"sample {int(np.argmax(bad))} has non-finite entries")
        return samples

    def check_estimable(self, samples):
        """Raise DomainError when no maximizer can exist on ``samples``."""

    def terms(self, x, y, theta, order=2):
        raise NotImplementedError

    def default_init(self, samples):
        raise NotImplementedError

    def to_free(self, theta):
        return np.array(theta, dtype=float)

    def from_free(self, eta):
        return np.array(eta, dtype=float)

    def free_derivatives(self, theta, grad, hess):
        """Gradient and Hessian with respect to the free parameters."""
        return grad, hess

    def value_grad_hess(self, sample, theta):
        theta = self.check_theta(theta)
        samples = self.check_samples(_samples_of(sample))
        v, g, h = self.terms(samples.x, samples.y, theta)
        if not (np.isfinite(v[0]) and np.all(np.isfinite(g)) and np.all(np.isfinite(h))):
            raise NonFiniteInput(f"{self.name} criterion not finite at theta={theta}")
        return float(v[0]), g[0].copy(), h[0].copy()


class LogisticModel(CriterionModel):
    """Logistic regression log-likelihood m = y x'theta - log(1 + exp(x'theta))."""

    name = "logistic"

    def __init__(self, dim):
        if int(dim) < 1:
            raise DimensionMismatch("logistic dimension must be >= 1")
        self.dim = int(dim)
        self.param_names = tuple(f"theta{j + 1}" for j in range(self.dim))

    def spec(self):
        return {"kind": self.name, "dim": self.dim}

    def check_samples(self, samples):
        samples = super().check_samples(samples)
        if samples.width != self.dim:
            raise DimensionMismatch(f"covariates have width {samples.width}, model expects {self.dim}")
        if samples.y is None:
            raise DomainError("logistic samples need a response y")
        bad = (samples.y != 0.0) & (samples.y != 1.0)
        if np.any(bad):
            raise DomainError(f"sample {int(np.argmax(bad))}: response must be 0 or 1")
        return samples

    @staticmethod
    def _softplus_and_prob(z):
        # log(1 + e^z) and e^z / (1 + e^z) without overflow
        soft = np.empty_like(z)
        hi = z > 36.0
        lo = z < -36.0
        mid = ~(hi | lo)
        soft[hi] = z[hi]
        soft[lo] = np.exp(z[lo])
        soft[mid] = np.log1p(np.exp(z[mid]))
        e = np.exp(-np.abs(z))
        p = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return soft, p

    def terms(self, x, y, theta, order=2):
        z = x @ theta
        soft, p = self._softplus_and_prob(z)
        v = y * z - soft
        if order == 0:
            return v, None, None
        g = (y - p)[:, None] * x
        if order == 1:
            return v, g, None
        w = -p * (1.0 - p)
        h = w[:, None, None] * (x[:, :, None] * x[:, None, :])
        return v, g, h

    def default_init(self, samples):
        return np.zeros(self.dim)


class BetaModel(CriterionModel):
    """Beta(alpha, beta) log-density; the solver works in (log alpha, log beta)."""

    name = "beta"
    dim = 2
    param_names = ("alpha", "beta")
    INIT_BOUNDS = (0.01, 100.0)

    def in_domain(self, theta):
        return bool(np.all(np.isfinite(theta)) and theta[0] > 0 and theta[1] > 0)

    def check_samples(self, samples):
        samples = super().check_samples(samples)
        if samples.width != 1:
            raise DimensionMismatch("beta samples are scalars")
        col = samples.x[:, 0]
        bad = ~((col > 0.0) & (col < 1.0))
        if np.any(bad):
            i = int(np.argmax(bad))
            raise DomainError(f"sample {i}: beta observation {col[i]!r} not in (0, 1)")
        return samples

    def terms(self, x, y, theta, order=2):
        a, b = float(theta[0]), float(theta[1])
        col = x[:, 0]
        lx = np.log(col)
        l1x = np.log1p(-col)
        try:
            const = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        except OverflowError:
            raise NonFiniteInput(f"log Beta function overflows at alpha={a!r}, beta={b!r}") from None
        v = const + (a - 1.0) * lx + (b - 1.0) * l1x
        if order == 0:
            return v, None, None
        psi_ab = digamma(a + b)
        g = np.empty((col.shape[0], 2))
        g[:, 0] = lx - digamma(a) + psi_ab
        g[:, 1] = l1x - digamma(b) + psi_ab
        if order == 1:
            return v, g, None
        t_ab = trigamma(a + b)
        hess = np.array([[t_ab - trigamma(a), t_ab], [t_ab, t_ab - trigamma(b)]])
        return v, g, np.broadcast_to(hess, (col.shape[0], 2, 2))

    def check_estimable(self, samples):
        _need_two_distinct(self, samples)

    def default_init(self, samples):
        col = _samples_of(samples).x[:, 0]
        mean = float(np.mean(col))
        var = float(np.var(col, ddof=1)) if col.shape[0] > 1 else 0.0
        lo, hi = self.INIT_BOUNDS
        if var <= 0.0:
            return np.array([1.0, 1.0])
        common = mean * (1.0 - mean) / var - 1.0
        if common <= 0.0:
            return np.array([lo, lo])
        return np.clip(np.array([mean * common, (1.0 - mean) * common]), lo, hi)

    def to_free(self, theta):
        return np.log(np.asarray(theta, dtype=float))

    def from_free(self, eta):
        # overflow gives inf, which check_theta rejects during the line search
        with np.errstate(over="ignore"):
            return np.exp(np.asarray(eta, dtype=float))

    def free_derivatives(self, theta, grad, hess):
        # eta = log(theta): d/d eta = theta * d/d theta
        g = theta * grad
        h = hess * np.outer(theta, theta) + np.diag(g)
        return g, h


class GaussianModel(CriterionModel):
    """Normal log-likelihood in (mu, sigma^2)."""

    name = "gaussian"
    dim = 2
    param_names = ("mu", "sigma2")
    INIT_PREFIX = 32
    VAR_FLOOR = 1e-6

    def in_domain(self, theta):
        return bool(np.all(np.isfinite(theta)) and theta[1] > 0)

    def check_samples(self, samples):
        samples = super().check_samples(samples)
        if samples.width != 1:
            raise DimensionMismatch("gaussian samples are scalars")
        return samples

    def terms(self, x, y, theta, order=2):
        # numpy scalars: overflow yields inf, which shard_criterion reports per sample
        mu, s = np.float64(theta[0]), np.float64(theta[1])
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            r = x[:, 0] - mu
            r2 = r * r
            v = -r2 / (2.0 * s) - _HALF_LOG_2PI - 0.5 * np.log(s)
            if order == 0:
                return v, None, None
            g = np.empty((r.shape[0], 2))
            g[:, 0] = r / s
            g[:, 1] = r2 / (2.0 * s * s) - 0.5 / s
            if order == 1:
                return v, g, None
            h = np.empty((r.shape[0], 2, 2))
            h[:, 0, 0] = -1.0 / s
            h[:, 0, 1] = h[:, 1, 0] = -r / (s * s)
            h[:, 1, 1] = 0.5 / (s * s) - r2 / (s * s * s)
        return v, g, h

    def check_estimable(self, samples):
        _need_two_distinct(self, samples)

    def default_init(self, samples):
        head = _samples_of(samples).x[: self.INIT_PREFIX, 0]
        var = float(np.var(head, ddof=1)) if head.shape[0] > 1 else 0.0
        return np.array([float(np.mean(head)), max(var, self.VAR_FLOOR)])


class GaussianMeanModel(CriterionModel):
    """Normal log-likelihood in mu alone, with sigma^2 held fixed (quadratic)."""

    name = "gaussian_mean"
    dim = 1
    param_names = ("mu",)

    def __init__(self, sigma2=1.0):
        if not sigma2 > 0:
            raise DomainError("sigma2 must be positive")
        self.sigma2 = float(sigma2)

    def spec(self):
        return {"kind": self.name, "sigma2": self.sigma2}

    def check_samples(self, samples):
        samples = super().check_samples(samples)
        if samples.width != 1:
            raise DimensionMismatch("gaussian samples are scalars")
        return samples

    def terms(self, x, y, theta, order=2):
        s = self.sigma2
        r = x[:, 0] - float(theta[0])
        v = -r * r / (2.0 * s) - _HALF_LOG_2PI - 0.5 * math.log(s)
        if order == 0:
            return v, None, None
        g = (r / s)[:, None]
        if order == 1:
            return v, g, None
        return v, g, np.full((r.shape[0], 1, 1), -1.0 / s)

    def default_init(self, samples):
        head = _samples_of(samples).x[:32, 0]
        return np.array([float(np.mean(head))])


class ScaledModel(CriterionModel):
    """``c * m(x; theta)`` for a positive constant ``c``; same maximizer."""

    def __init__(self, base, scale):
        if not scale > 0:
            raise DomainError("scale must be positive")
        self.base = base
        self.scale = float(scale)
        self.name = base.name
        self.dim = base.dim
        self.param_names = base.param_names

    def spec(self):
        return dict(self.base.spec(), scale=self.scale)

    def in_domain(self, theta):
        return self.base.in_domain(theta)

    def check_samples(self, samples):
        return self.base.check_samples(samples)

    def terms(self, x, y, theta, order=2):
        v, g, h = self.base.terms(x, y, theta, order)
        c = self.scale
        return c * v, None if g is None else c * g, None if h is None else c * h

    def check_estimable(self, samples):
        self.base.check_estimable(samples)

    def default_init(self, samples):
        return self.base.default_init(samples)

    def to_free(self, theta):
        return self.base.to_free(theta)

    def from_free(self, eta):
        return self.base.from_free(eta)

    def free_derivatives(self, theta, grad, hess):
        return self.base.free_derivatives(theta, grad, hess)


_REGISTRY = {
    "logistic": lambda spec: LogisticModel(spec["dim"]),
    "beta": lambda spec: BetaModel(),
    "gaussian": lambda spec: GaussianModel(),
    "gaussian_mean": lambda spec: GaussianMeanModel(spec.get("sigma2", 1.0)),
}


def model_from_spec(spec):
    """Rebuild a model from the dict produced by ``model.spec()``."""
    try:
        build = _REGISTRY[spec["kind"]]
    except KeyError:
        raise DomainError(f"unknown model kind {spec.get('kind')!r}") from None
    model = build(spec)
    if "scale" in spec:
        model = ScaledModel(model, spec["scale"])
    return model


def make_model(kind, dim=None):
    if kind == "logistic":
        return LogisticModel(dim if dim is not None else 20)
    return model_from_spec({"kind": kind})


def logistic_value_grad_hess(sample, theta):
    return LogisticModel(np.asarray(theta).reshape(-1).shape[0]).value_grad_hess(sample, theta)


def beta_value_grad_hess(sample, theta):
    return BetaModel().value_grad_hess(sample, theta)


def gaussian_value_grad_hess(sample, theta):
    return GaussianModel().value_grad_hess(sample, theta)


def _locate_nonfinite(model, samples, theta, order):
    v, g, h = model.terms(samples.x, samples.y, theta, order)
    bad = ~np.isfinite(v)
    if g is not None:
        bad |= ~np.all(np.isfinite(g), axis=1)
    if h is not None:
        bad |= ~np.all(np.isfinite(h.reshape(h.shape[0], -1)), axis=1)
    return int(np.argmax(bad)) if np.any(bad) else None


def shard_criterion(model, shard, theta, order=2):
    """Mean value, gradient and Hessian of ``model`` over the samples of ``shard``.

    ``shard`` may be a :class:`Samples` or anything with a ``samples``
    attribute.  Returns ``(value, grad, hess)``; with ``order < 2`` the
    missing pieces are ``None``.
    """
    samples = _samples_of(shard)
    n = len(samples)
    if n == 0:
        raise EmptyShard("cannot evaluate a criterion on an empty shard")
    theta = model.check_theta(theta)
    d = model.dim
    width = 1 + (d if order >= 1 else 0) + (d * d if order >= 2 else 0)
    step = max(1, _CHUNK_ENTRIES // width)
    partials = []
    for start in range(0, n, step):
        x = samples.x[start:start + step]
        y = None if samples.y is None else samples.y[start:start + step]
        v, g, h = model.terms(x, y, theta, order)
        cols = [v[:, None]]
        if order >= 1:
            cols.append(g)
        if order >= 2:
            cols.append(h.reshape(h.shape[0], d * d))
        partials.append(compensated_sum(np.concatenate(cols, axis=1)))
    total = partials[0] if len(partials) == 1 else compensated_sum(np.stack(partials))
    mean = total / n
    if not np.all(np.isfinite(mean)):
        i = _locate_nonfinite(model, samples, theta, order)
        raise NonFiniteInput(f"sample {i}: {model.name} criterion not finite at theta={theta}")
    value = float(mean[0])
    grad = mean[1:1 + d].copy() if order >= 1 else None
    hess = mean[1 + d:].reshape(d, d).copy() if order >= 2 else None
    return value, grad, hess
