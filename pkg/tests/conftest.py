import numpy as np
import pytest


def central_diff(f, theta, h_rel=1e-5):
    """Central difference of a scalar or array valued ``f``; step 1e-5*(1+|theta_j|)."""
    theta = np.asarray(theta, dtype=float)
    cols = []
    for j in range(theta.shape[0]):
        h = h_rel * (1.0 + abs(theta[j]))
        up = theta.copy()
        dn = theta.copy()
        up[j] += h
        dn[j] -= h
        cols.append((np.asarray(f(up)) - np.asarray(f(dn))) / (2 * h))
    return np.stack(cols, axis=-1)


def rel_close(a, b, rtol, floor=1.0):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return bool(np.all(np.abs(a - b) <= rtol * np.maximum(np.abs(b), floor)))


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


_CRITERIA = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_CRITERIA] = {}


@pytest.fixture
def criterion(request):
    """Context manager recording one acceptance criterion's verdict for the summary."""
    from contextlib import contextmanager

    @contextmanager
    def record(label, detail=""):
        results = request.config.stash[_CRITERIA]
        try:
            yield
        except BaseException as exc:
            msg = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
            results[label] = (False, msg[:160])
            raise
        results[label] = (True, detail() if callable(detail) else detail)

    return record


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_CRITERIA, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(results, key=lambda s: (int(s.split()[0].rstrip("abcdefgh")), s)):
        ok, detail = results[label]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {label}  {detail}")
