import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_diff, rel_close
from onestep.errors import DimensionMismatch, DomainError, EmptyShard, NonFiniteInput
from onestep.linalg import max_eigenvalue
from onestep.model import (
    BetaModel,
    GaussianMeanModel,
    GaussianModel,
    LogisticModel,
    Sample,
    Samples,
    ScaledModel,
    beta_value_grad_hess,
    gaussian_value_grad_hess,
    logistic_value_grad_hess,
    make_model,
    model_from_spec,
    shard_criterion,
)

LOG2 = math.log(2.0)
HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


def test_logistic_at_zero():
    x = np.array([0.3, -1.2, 2.0])
    v, g, h = logistic_value_grad_hess(Sample(x, 1.0), np.zeros(3))
    assert v == pytest.approx(-LOG2, abs=1e-15)
    np.testing.assert_allclose(g, x / 2, atol=1e-15)
    np.testing.assert_allclose(h, -np.outer(x, x) / 4, atol=1e-15)


def test_logistic_zero_covariates():
    v, g, h = logistic_value_grad_hess(Sample(np.zeros(2), 0.0), np.zeros(2))
    assert v == pytest.approx(-LOG2, abs=1e-15)
    np.testing.assert_array_equal(g, [0.0, 0.0])
    np.testing.assert_array_equal(h, np.zeros((2, 2)))


@pytest.mark.parametrize("z", [-700.0, -36.5, 36.5, 700.0])
def test_logistic_overflow_safe(z):
    for y in (0.0, 1.0):
        v, g, h = logistic_value_grad_hess(Sample(np.array([1.0]), y), np.array([z]))
        assert np.isfinite(v) and np.all(np.isfinite(g)) and np.all(np.isfinite(h))
    # log(1 + e^z) ~ max(z, 0) at this range
    v, _, _ = logistic_value_grad_hess(Sample(np.array([1.0]), 0.0), np.array([z]))
    assert v == pytest.approx(-max(z, 0.0), abs=1e-15 + abs(math.exp(-abs(z))))


def test_logistic_random_finite_difference(rng):
    model = LogisticModel(5)
    for _ in range(20):
        x = rng.uniform(-1, 1, 5)
        y = float(rng.integers(0, 2))
        theta = rng.uniform(-1, 1, 5)
        s = Sample(x, y)
        _, g, h = model.value_grad_hess(s, theta)
        assert rel_close(g, central_diff(lambda t: model.value_grad_hess(s, t)[0], theta), 1e-6)
        assert rel_close(h, central_diff(lambda t: model.value_grad_hess(s, t)[1], theta), 1e-5)


def test_logistic_rejects_bad_response():
    with pytest.raises(DomainError):
        LogisticModel(1).check_samples(Samples(np.array([[0.1]]), np.array([0.5])))
    with pytest.raises(DimensionMismatch):
        LogisticModel(2).check_samples(Samples(np.array([[0.1]]), np.array([1.0])))


def test_beta_uniform_density():
    for x in (0.01, 0.3, 0.77, 0.999):
        v, _, _ = beta_value_grad_hess(Sample(np.array([x])), np.array([1.0, 1.0]))
        assert v == pytest.approx(0.0, abs=1e-15)


def test_beta_gradient_closed_form():
    # alpha=beta=1: psi(2) - psi(1) = 1
    _, g, h = beta_value_grad_hess(Sample(np.array([0.5])), np.array([1.0, 1.0]))
    np.testing.assert_allclose(g, [math.log(0.5) + 1.0] * 2, atol=1e-13)
    t2 = math.pi**2 / 6 - 1.0
    np.testing.assert_allclose(h, [[t2 - math.pi**2 / 6, t2], [t2, t2 - math.pi**2 / 6]], atol=1e-13)


def test_beta_finite_difference(rng):
    s = Sample(np.array([0.3]))
    for _ in range(20):
        theta = rng.uniform(1, 3, 2)
        _, g, h = beta_value_grad_hess(s, theta)
        assert rel_close(g, central_diff(lambda t: beta_value_grad_hess(s, t)[0], theta), 1e-6)
        assert rel_close(h, central_diff(lambda t: beta_value_grad_hess(s, t)[1], theta), 1e-5)


@pytest.mark.parametrize("x", [0.0, 1.0, -0.2, 1.5])
def test_beta_rejects_boundary(x):
    with pytest.raises(DomainError, match="sample 1"):
        BetaModel().check_samples(Samples(np.array([0.5, x])))


@pytest.mark.parametrize("theta", [[0.0, 1.0], [1.0, -2.0]])
def test_beta_rejects_parameters(theta):
    with pytest.raises(DomainError):
        beta_value_grad_hess(Sample(np.array([0.5])), np.array(theta))


def test_gaussian_centered_sample():
    v, g, _ = gaussian_value_grad_hess(Sample(np.array([0.7])), np.array([0.7, 1.0]))
    assert v == pytest.approx(-HALF_LOG_2PI, abs=1e-15)
    assert g[0] == 0.0
    assert g[1] == pytest.approx(-0.5, abs=1e-15)


def test_gaussian_direct_substitution():
    v, g, _ = gaussian_value_grad_hess(Sample(np.array([1.0])), np.array([0.0, 1.0]))
    assert v == pytest.approx(-0.5 - HALF_LOG_2PI, abs=1e-15)
    assert g[0] == pytest.approx(1.0, abs=1e-15)


def test_gaussian_finite_difference(rng):
    for _ in range(20):
        s = Sample(np.array([rng.normal(0, 3)]))
        theta = np.array([rng.uniform(-2, 2), rng.uniform(0.25, 9)])
        _, g, h = gaussian_value_grad_hess(s, theta)
        assert rel_close(g, central_diff(lambda t: gaussian_value_grad_hess(s, t)[0], theta), 1e-6)
        assert rel_close(h, central_diff(lambda t: gaussian_value_grad_hess(s, t)[1], theta), 1e-5)


def test_gaussian_rejects_variance():
    with pytest.raises(DomainError):
        gaussian_value_grad_hess(Sample(np.array([1.0])), np.array([0.0, 0.0]))


def test_gaussian_hessian_can_be_indefinite():
    # the per-sample (mu, sigma^2) Hessian has H22 = 1/(2 s^2) - r^2/s^3 > 0 near x = mu
    _, _, h = gaussian_value_grad_hess(Sample(np.array([0.0])), np.array([0.0, 1.0]))
    assert h[1, 1] == pytest.approx(0.5)
    assert max_eigenvalue(h) > 0


def _random_case(kind, rng):
    if kind == "logistic":
        model = LogisticModel(3)
        s = Sample(rng.uniform(-1, 1, 3), float(rng.integers(0, 2)))
        theta = rng.uniform(-1, 1, 3)
    elif kind == "beta":
        model = BetaModel()
        s = Sample(np.array([rng.uniform(0.02, 0.98)]))
        theta = rng.uniform(0.5, 5, 2)
    else:
        model = GaussianModel()
        s = Sample(np.array([rng.normal(0, 2)]))
        theta = np.array([rng.uniform(-2, 2), rng.uniform(0.25, 9)])
    return model, s, theta


@pytest.mark.parametrize("kind", ["logistic", "beta", "gaussian"])
def test_hessian_symmetry(kind, rng):
    for _ in range(50):
        model, s, theta = _random_case(kind, rng)
        _, _, h = model.value_grad_hess(s, theta)
        assert np.max(np.abs(h - h.T)) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.floats(-1, 1), min_size=4, max_size=4),
    st.lists(st.floats(-5, 5), min_size=4, max_size=4),
    st.integers(0, 1),
)
def test_logistic_hessian_nsd(x, theta, y):
    _, _, h = LogisticModel(4).value_grad_hess(Sample(np.array(x), float(y)), np.array(theta))
    assert max_eigenvalue(h) <= 1e-10


def test_gaussian_shard_hessian_nsd_at_mle(rng):
    x = rng.normal(1.0, 2.0, 200)
    mle = np.array([x.mean(), x.var()])
    _, _, h = shard_criterion(GaussianModel(), Samples(x), mle)
    assert max_eigenvalue(h) <= 1e-10


def test_shard_single_sample_exact(rng):
    model = LogisticModel(3)
    s = Sample(rng.uniform(-1, 1, 3), 1.0)
    theta = rng.normal(size=3)
    v1, g1, h1 = model.value_grad_hess(s, theta)
    v2, g2, h2 = shard_criterion(model, Samples.from_list([s]), theta)
    assert v1 == v2
    np.testing.assert_array_equal(g1, g2)
    np.testing.assert_array_equal(h1, h2)


def test_shard_duplicated_sample():
    model = BetaModel()
    s = Sample(np.array([0.41]))
    theta = np.array([1.7, 2.2])
    one = shard_criterion(model, Samples.from_list([s]), theta)
    two = shard_criterion(model, Samples.from_list([s, s]), theta)
    assert one[0] == two[0]
    np.testing.assert_array_equal(one[1], two[1])
    np.testing.assert_array_equal(one[2], two[2])


def test_shard_gradient_zero_at_closed_form_mle(rng):
    x = rng.normal(-0.5, 1.5, 100)
    mle = np.array([x.mean(), np.mean((x - x.mean()) ** 2)])
    _, g, _ = shard_criterion(GaussianModel(), Samples(x), mle)
    assert np.linalg.norm(g) <= 1e-10


def test_shard_order_invariance(rng):
    model = LogisticModel(4)
    x = rng.uniform(-1, 1, (500, 4))
    y = rng.integers(0, 2, 500).astype(float)
    theta = rng.normal(size=4)
    base = shard_criterion(model, Samples(x, y), theta)
    for _ in range(5):
        p = rng.permutation(500)
        other = shard_criterion(model, Samples(x[p], y[p]), theta)
        assert abs(base[0] - other[0]) <= 1e-12
        assert np.max(np.abs(base[1] - other[1])) <= 1e-12
        assert np.max(np.abs(base[2] - other[2])) <= 1e-12


def test_shard_matches_plain_mean(rng):
    model = GaussianModel()
    x = rng.normal(size=1000)
    theta = np.array([0.1, 1.3])
    v, g, h = shard_criterion(model, Samples(x), theta)
    vals = [model.value_grad_hess(Sample(np.array([xi])), theta) for xi in x]
    assert v == pytest.approx(np.mean([t[0] for t in vals]), abs=1e-12)
    np.testing.assert_allclose(g, np.mean([t[1] for t in vals], axis=0), atol=1e-12)
    np.testing.assert_allclose(h, np.mean([t[2] for t in vals], axis=0), atol=1e-12)


def test_shard_empty():
    with pytest.raises(EmptyShard):
        shard_criterion(GaussianModel(), Samples(np.zeros((0, 1))), np.array([0.0, 1.0]))


def test_shard_reports_offending_sample():
    x = np.array([0.1, 0.2, 1e200, 0.3])
    with pytest.raises(NonFiniteInput, match="sample 2"):
        shard_criterion(GaussianModel(), Samples(x), np.array([0.0, 1.0]))
    with pytest.raises(NonFiniteInput):
        shard_criterion(GaussianModel(), Samples(x), np.array([0.0, 1e-200]))


def test_nonfinite_samples_rejected():
    with pytest.raises(NonFiniteInput, match="sample 1"):
        GaussianModel().check_samples(Samples(np.array([0.0, np.nan])))


def test_gaussian_mean_model_quadratic(rng):
    model = GaussianMeanModel(2.0)
    x = rng.normal(size=50)
    _, g, h = shard_criterion(model, Samples(x), np.array([0.3]))
    assert g[0] == pytest.approx((x.mean() - 0.3) / 2.0, abs=1e-14)
    assert h[0, 0] == -0.5


def test_scaled_model(rng):
    base = BetaModel()
    model = ScaledModel(base, 3.5)
    x = Samples(rng.uniform(0.1, 0.9, 20))
    theta = np.array([1.5, 2.5])
    a = shard_criterion(base, x, theta)
    b = shard_criterion(model, x, theta)
    assert b[0] == pytest.approx(3.5 * a[0], rel=1e-14)
    np.testing.assert_allclose(b[1], 3.5 * a[1], rtol=1e-14)
    np.testing.assert_allclose(b[2], 3.5 * a[2], rtol=1e-14)
    assert model_from_spec(model.spec()).spec() == model.spec()


@pytest.mark.parametrize("kind", ["logistic", "beta", "gaussian", "gaussian_mean"])
def test_spec_round_trip(kind):
    model = make_model(kind, 3)
    again = model_from_spec(model.spec())
    assert type(again) is type(model) and again.dim == model.dim


def test_estimability():
    with pytest.raises(DomainError):
        BetaModel().check_estimable(Samples(np.array([0.4])))
    with pytest.raises(DomainError):
        GaussianModel().check_estimable(Samples(np.array([2.0, 2.0])))
    BetaModel().check_estimable(Samples(np.array([0.4, 0.5])))


def test_samples_container():
    s = Samples.from_list([Sample(np.array([1.0, 2.0]), 1.0), Sample(np.array([3.0, 4.0]), 0.0)])
    assert len(s) == 2 and s.width == 2
    assert s[1].y == 0.0
    assert s == Samples(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([1.0, 0.0]))
    assert s.take([1]) == Samples(np.array([[3.0, 4.0]]), np.array([0.0]))
    assert Samples.concat([s.take([0]), s.take([1])]) == s
    with pytest.raises(DimensionMismatch):
        Samples(np.zeros((2, 1)), np.zeros(3))
