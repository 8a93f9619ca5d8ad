import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from condflow.errors import InvalidArgumentError, SingularTimeError, UnsupportedError
from condflow.interpolant import (
    T_CAP,
    EmpiricalSupport,
    case1_velocity,
    case1_xbar,
    case2_weights,
    exact_empirical_velocity,
    gaussian_velocity_oracle,
    interpolant_rate,
    interpolate,
)
from condflow.ode import SolverConfig, integrate_batch

finite = st.floats(-50, 50, allow_nan=False)


def test_interpolate_examples():
    assert interpolate([3.0], [7.0], 0.0) == pytest.approx([3.0])
    assert interpolate([3.0], [7.0], 1.0) == pytest.approx([7.0])
    assert np.allclose(interpolate([0.0, 2.0], [2.0, 0.0], 0.5), [1.0, 1.0])


def test_rate_examples():
    assert np.array_equal(interpolant_rate([3.0], [7.0]), [4.0])
    assert np.array_equal(interpolant_rate([5.0, 5.0], [5.0, 5.0]), [0.0, 0.0])
    assert np.array_equal(interpolant_rate([1.0, -1.0], [-1.0, 1.0]), [-2.0, 2.0])


def test_shape_mismatch():
    with pytest.raises(InvalidArgumentError):
        interpolate([1.0], [1.0, 2.0], 0.3)
    with pytest.raises(InvalidArgumentError):
        interpolant_rate([1.0], [1.0, 2.0])


@given(arrays(float, 3, elements=finite), arrays(float, 3, elements=finite),
       st.floats(0, 1), st.floats(0, 1))
def test_interpolate_boundaries_and_affine(z, x, t1, t2):
    assert np.array_equal(interpolate(z, x, 0.0), z)
    assert np.array_equal(interpolate(z, x, 1.0), x)
    mid = interpolate(z, x, 0.5 * (t1 + t2))
    avg = 0.5 * (interpolate(z, x, t1) + interpolate(z, x, t2))
    assert np.allclose(mid, avg, atol=1e-12 * (1 + np.abs(z).max() + np.abs(x).max()))


TWO = EmpiricalSupport(np.array([[0.0], [2.0]]), np.array([[0.0], [1.0]]))


def test_case1_xbar_examples():
    assert case1_xbar(TWO, 0.5) == pytest.approx([1.0])
    assert case1_xbar(TWO, 0.0) == pytest.approx([0.0])
    assert case1_xbar(TWO, 1.0) == pytest.approx([2.0])
    # clamped basis: outside the data range the nearest endpoint carries all the weight
    assert case1_xbar(TWO, -3.0) == pytest.approx([0.0])
    assert case1_xbar(TWO, 4.0) == pytest.approx([2.0])


def test_case1_xbar_interpolatory(rng):
    sup = EmpiricalSupport(rng.normal(size=(7, 2)), rng.permutation(7).astype(float))
    for i in range(7):
        assert np.allclose(case1_xbar(sup, sup.points_y[i]), sup.points_x[i])


def test_case1_errors():
    with pytest.raises(InvalidArgumentError):
        case1_xbar(EmpiricalSupport([[0.0], [1.0]], [[1.0], [1.0]]), 0.0)
    with pytest.raises(UnsupportedError):
        case1_xbar(EmpiricalSupport([[0.0]], [[1.0, 2.0]]), [0.0, 0.0])
    with pytest.raises(SingularTimeError):
        case1_velocity(TWO, [0.0], 0.5, 1.0)


def test_case1_velocity_examples():
    assert case1_velocity(TWO, [0.0], 0.5, 0.0) == pytest.approx([1.0])
    for t in (0.0, 0.3, 0.9):
        assert np.allclose(case1_velocity(TWO, [1.0], 0.5, t), [0.0])


def test_case1_collapse_under_solver(rng):
    sup = EmpiricalSupport(rng.uniform(-1, 1, (5, 1)), rng.uniform(-1, 1, (5, 1)))
    yq = 0.1
    res = integrate_batch(lambda x, t: case1_velocity(sup, x, yq, t), rng.normal(size=(100, 1)), SolverConfig.singular())
    assert np.all(res.converged)
    assert np.max(np.abs(res.x_final - case1_xbar(sup, yq))) < 1e-6


def test_case2_weights_examples():
    sup = EmpiricalSupport.from_x(np.array([[1.0], [-1.0], [0.3]]))
    assert np.allclose(case2_weights(sup, [0.7], 0.0), 1 / 3)
    pair = EmpiricalSupport.from_x(np.array([[1.0], [-1.0]]))
    for t in (0.1, 0.5, 0.99):
        assert np.allclose(case2_weights(pair, [0.0], t), [0.5, 0.5])
    # near t = 1 the weight concentrates on the point the state is heading to
    w = case2_weights(sup, [0.95], 0.999)
    assert w[0] > 1 - 1e-12


@settings(max_examples=60)
@given(arrays(float, (4, 2), elements=st.floats(-5, 5)), arrays(float, 2, elements=st.floats(-20, 20)),
       st.floats(0, T_CAP))
def test_case2_partition_of_unity(px, xi, t):
    w = case2_weights(EmpiricalSupport.from_x(px), xi, t)
    assert abs(w.sum() - 1.0) < 1e-12
    assert np.all(w >= 0)


def test_case2_batched_matches_single(rng):
    sup = EmpiricalSupport.from_x(rng.normal(size=(5, 2)))
    xi = rng.normal(size=(8, 2))
    t = rng.random(8) * 0.9
    wb = case2_weights(sup, xi, t)
    vb = exact_empirical_velocity(sup, xi, t)
    for k in range(8):
        assert np.allclose(wb[k], case2_weights(sup, xi[k], t[k]))
        assert np.allclose(vb[k], exact_empirical_velocity(sup, xi[k], t[k]))


def test_exact_velocity_examples():
    one = EmpiricalSupport.from_x(np.array([[2.0, -1.0]]))
    xi = np.array([0.5, 0.5])
    assert np.allclose(exact_empirical_velocity(one, xi, 0.4), (one.points_x[0] - xi) / 0.6)
    pair = EmpiricalSupport.from_x(np.array([[1.0], [-1.0]]))
    assert np.allclose(exact_empirical_velocity(pair, [0.0], 0.7), [0.0])
    with pytest.raises(SingularTimeError):
        exact_empirical_velocity(pair, [0.0], 1.0)


def test_single_point_flow_is_straight_line(rng):
    x1 = np.array([0.7, -1.2])
    one = EmpiricalSupport.from_x(x1[None, :])
    x0 = rng.normal(size=(10, 2))
    for t_end in (0.25, 0.5, 0.9):
        res = integrate_batch(lambda x, t: exact_empirical_velocity(one, x, t), x0,
                              SolverConfig(rtol=1e-9, atol=1e-12, t_end=t_end))
        assert np.allclose(res.x_final, (1 - t_end) * x0 + t_end * x1, atol=1e-8)


def test_gaussian_oracle_closed_form():
    t = np.linspace(0, 0.95, 7)
    xi = 1.3
    assert np.allclose(gaussian_velocity_oracle(0.0, 1.0, xi, t), (2 * t - 1) * xi / ((1 - t) ** 2 + t**2))
    # at t = 0 the state is the source draw itself, so E[X - Z | Z = xi] = mu - xi
    assert gaussian_velocity_oracle(0.4, 0.5, xi, 0.0) == pytest.approx(0.4 - xi)
    with pytest.raises(InvalidArgumentError):
        gaussian_velocity_oracle(0.0, 0.0, 1.0, 0.5)


@pytest.mark.parametrize("mu,sigma,t,xi", [(0.5, 0.7, 0.3, 0.2), (-1.0, 2.0, 0.6, -1.5), (0.3, 0.4, 0.99, 0.3)])
def test_gaussian_oracle_monte_carlo(mu, sigma, t, xi):
    # conditional expectation of X - Z given X_t in a bin of width 0.05 around xi
    g = np.random.default_rng(7)
    n = 4_000_000
    z = g.standard_normal(n)
    x = mu + sigma * g.standard_normal(n)
    xt = (1 - t) * z + t * x
    sel = np.abs(xt - xi) < 0.025
    est = np.mean((x - z)[sel])
    se = np.std((x - z)[sel]) / np.sqrt(sel.sum())
    assert sel.sum() > 10_000
    assert abs(est - gaussian_velocity_oracle(mu, sigma, xi, t)) < 5 * se + 2e-3
