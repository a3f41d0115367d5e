"""Small dense linear algebra used across the package.

Everything here works on float64 numpy arrays of modest size (d <= ~100).
Two things matter more than speed:

* reductions are compensated, so that means of per-sample terms do not
  depend (beyond ~1e-15 relative) on the order in which samples arrive;
* symmetric solves report definiteness failures instead of silently
  returning garbage, because a Hessian that does not factor is a useful
  diagnostic in itself.
"""

import warnings

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import DimensionMismatch, NonFiniteInput, NotDefinite

RIDGE_LADDER = (1e-8, 1e-6, 1e-4)
CONDITION_WARN = 1e8


class ConditioningWarning(UserWarning):
    pass


def as_vector(v, d=None):
    v = np.asarray(v, dtype=float)
    if v.ndim != 1:
        raise DimensionMismatch(f"expected a vector, got shape {v.shape}")
    if d is not None and v.shape[0] != d:
        raise DimensionMismatch(f"expected length {d}, got {v.shape[0]}")
    if not np.all(np.isfinite(v)):
        raise NonFiniteInput("vector has non-finite entries")
    return v


def as_square(a):
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NonFiniteInput("matrix has non-finite entries")
    return a


def symmetry_tolerance(a):
    return 1e-10 * max(1.0, float(np.max(np.abs(a), initial=0.0)))


def is_symmetric(a):
    a = np.asarray(a, dtype=float)
    return bool(np.max(np.abs(a - a.T), initial=0.0) <= symmetry_tolerance(a))


def compensated_sum(a, axis=0):
    """Sum ``a`` along ``axis`` with cascaded pairwise TwoSum compensation.

    Each pairwise addition records its exact rounding error; the errors are
    accumulated separately and added back at the end.  The result is
    accurate to about one ulp plus ``n * eps**2`` times the absolute sum, so
    permuting the summands changes the result by far less than 1e-12.
    """
    a = np.moveaxis(np.asarray(a, dtype=float), axis, 0)
    if a.shape[0] == 0:
        return np.zeros(a.shape[1:])
    err = np.zeros(a.shape[1:])
    # non-finite input gives a non-finite sum; callers check for that
    with np.errstate(invalid="ignore", over="ignore"):
        while a.shape[0] > 1:
            if a.shape[0] % 2:
                a = np.concatenate([a, np.zeros((1,) + a.shape[1:])])
            x = a[0::2]
            y = a[1::2]
            s = x + y
            z = s - x
            err = err + ((x - (s - z)) + (y - z)).sum(axis=0)
            a = s
        return a[0] + err


def compensated_mean(a, axis=0):
    a = np.asarray(a, dtype=float)
    n = a.shape[axis]
    return compensated_sum(a, axis=axis) / n


def _factor(c):
    try:
        factor = cho_factor(c, lower=True, check_finite=False)
    except LinAlgError:
        return None
    if not np.all(np.isfinite(factor[0])):
        return None
    diag = np.abs(np.diag(factor[0]))
    if np.min(diag) <= 0.0:
        return None
    if (np.max(diag) / np.min(diag)) ** 2 > CONDITION_WARN:
        warnings.warn(
            f"ill-conditioned system (condition estimate "
            f"{(np.max(diag) / np.min(diag)) ** 2:.3g})",
            ConditioningWarning,
            stacklevel=3,
        )
    return factor


def solve_symmetric(A, b, ridge=0.0, definite="negative"):
    """Solve ``A x = b`` for symmetric ``A`` of known definiteness.

    With ``definite="negative"`` the system solved is ``(A - ridge*I) x = b``
    by Cholesky-factoring ``-A + ridge*I``; with ``"positive"`` it is
    ``(A + ridge*I) x = b``.  ``b`` may be a vector or a matrix of
    right-hand sides.  Raises :class:`NotDefinite` when the shifted matrix
    does not factor.
    """
    A = as_square(A)
    b = np.asarray(b, dtype=float)
    if b.shape[0] != A.shape[0]:
        raise DimensionMismatch(f"matrix is {A.shape}, right-hand side {b.shape}")
    if not np.all(np.isfinite(b)):
        raise NonFiniteInput("right-hand side has non-finite entries")
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    if not is_symmetric(A):
        raise NotDefinite("matrix is not symmetric")
    if definite == "negative":
        sign = -1.0
    elif definite == "positive":
        sign = 1.0
    else:
        raise ValueError(f"definite must be 'negative' or 'positive', not {definite!r}")
    c = sign * A
    if ridge:
        c = c + ridge * np.eye(A.shape[0])
    factor = _factor(c)
    if factor is None:
        raise NotDefinite(f"matrix is not {definite} definite (ridge={ridge:g})")
    return sign * cho_solve(factor, b, check_finite=False)


def solve_definite(A, b, definite="negative", ladder=RIDGE_LADDER):
    """Like :func:`solve_symmetric`, retrying along the ridge ladder.

    Ridges are relative to the largest absolute diagonal entry.  Returns
    ``(x, ridge_used)``.
    """
    try:
        return solve_symmetric(A, b, 0.0, definite), 0.0
    except NotDefinite:
        pass
    scale = float(np.max(np.abs(np.diag(np.asarray(A, dtype=float))), initial=0.0))
    for rel in ladder:
        ridge = rel * scale
        if ridge == 0.0:
            break
        try:
            return solve_symmetric(A, b, ridge, definite), ridge
        except NotDefinite:
            continue
    raise NotDefinite(f"matrix is not {definite} definite after ridge ladder")


def newton_increment(hess, grad, ladder=RIDGE_LADDER):
    """Return ``x`` with ``hess @ x = grad`` for a negative definite ``hess``.

    A Newton ascent step is ``theta - x``.  Both the local solver and the
    distributed one-step update go through this function, so the two agree
    bit for bit on identical inputs.
    """
    x, _ = solve_definite(hess, grad, "negative", ladder)
    return x


def spectral_norm(A):
    A = np.asarray(A, dtype=float)
    if not np.all(np.isfinite(A)):
        raise NonFiniteInput("matrix has non-finite entries")
    if A.size == 0:
        return 0.0
    return float(np.linalg.norm(A, 2))


def max_eigenvalue(A):
    """Largest eigenvalue of a symmetric matrix (diagnostics only)."""
    A = np.asarray(A, dtype=float)
    return float(np.linalg.eigvalsh(0.5 * (A + A.T))[-1])


def min_eigenvalue(A):
    A = np.asarray(A, dtype=float)
    return float(np.linalg.eigvalsh(0.5 * (A + A.T))[0])
