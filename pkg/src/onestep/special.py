"""Digamma and trigamma for positive real arguments.

Upward recurrence to x >= 10, then the asymptotic series with Bernoulli
numbers B2..B14; truncation error at x = 10 is below 1e-16.
"""

import math

from .errors import DomainError

_SHIFT = 10.0
# B2, B4, ..., B14
_BERNOULLI = (1 / 6, -1 / 30, 1 / 42, -1 / 30, 5 / 66, -691 / 2730, 7 / 6)


def _check(x):
    x = float(x)
    if not x > 0 or not math.isfinite(x):
        raise DomainError(f"polygamma argument must be positive and finite, got {x!r}")
    return x


def digamma(x):
    x = _check(x)
    acc = 0.0
    while x < _SHIFT:
        acc -= 1.0 / x
        x += 1.0
    inv2 = 1.0 / (x * x)
    series = 0.0
    power = inv2
    for k, b in enumerate(_BERNOULLI, start=1):
        series += b / (2 * k) * power
        power *= inv2
    return acc + math.log(x) - 0.5 / x - series


def trigamma(x):
    x = _check(x)
    acc = 0.0
    while x < _SHIFT:
        acc += 1.0 / (x * x)
        x += 1.0
    inv = 1.0 / x
    inv2 = inv * inv
    series = 0.0
    power = inv2 * inv
    for b in _BERNOULLI:
        series += b * power
        power *= inv2
    return acc + inv + 0.5 * inv2 + series
