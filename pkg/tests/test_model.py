from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st

from superctl.measure_space import AtomicMeasure, TestFunction, clamped_identity, constant_function, function_from_callables, gaussian_function
from superctl.model import (
    Affine,
    Coefficients,
    Constant,
    ControlSet,
    CostSpec,
    FeedbackPolicy,
    FromCallable,
    Table,
    features,
    generator_L,
    measure_free_coefficients,
)

from conftest import atomic_measures

square_fn = function_from_callables(lambda x: x[:, 0] ** 2, lambda x: 2 * x, lambda x: np.full((x.shape[0], 1, 1), 2.0),
                                    dim=1, box=[(-3.0, 3.0)], name="square")


def test_generator_zero_coefficients():
    c = measure_free_coefficients(0.0, 0.0, 0.0)
    assert generator_L(gaussian_function(0.3), [0.7], AtomicMeasure.zero(), [0.0], c) == 0.0


def test_generator_identity_gives_drift():
    c = measure_free_coefficients(b=1.7, sigma=0.4)
    phi = clamped_identity(5.0)
    assert generator_L(phi, [0.2], AtomicMeasure.zero(), [0.0], c) == pytest.approx(1.7, abs=1e-12)


def test_generator_square_gives_sigma_squared():
    s = 0.8
    c = measure_free_coefficients(b=0.0, sigma=s)
    assert generator_L(square_fn, [0.3], AtomicMeasure.zero(), [0.0], c) == pytest.approx(s**2, abs=1e-12)


def test_generator_square_against_euler_estimate():
    # independent estimate E[phi(X_dt) - phi(x)] / dt from one Euler step
    s, x0, dt, N = 0.8, 0.3, 1e-2, 400_000
    rng = np.random.default_rng(7)
    X = x0 + s * np.sqrt(dt) * rng.standard_normal(N)
    est = np.mean(X**2 - x0**2) / dt
    se = np.std(X**2 - x0**2) / dt / np.sqrt(N)
    c = measure_free_coefficients(sigma=s)
    assert abs(est - generator_L(square_fn, [x0], AtomicMeasure.zero(), [0.0], c)) < 4 * se


def test_features():
    assert features(AtomicMeasure.dirac(0.0), measure_free_coefficients()).shape == (0,)
    one = Coefficients(1, 1, 1, 0.0, 0.0, 1.0, feature_functions=(constant_function(1.0),))
    assert features(AtomicMeasure(2, [[0.0]], [5]), one).tolist() == [2.5]
    g = Coefficients(1, 1, 1, 0.0, 0.0, 1.0, feature_functions=(gaussian_function(0.0),))
    assert features(AtomicMeasure(2, [[0.0], [1.0]], [1, 1]), g)[0] == pytest.approx(0.68394, abs=5e-6)


def test_control_set_projection_and_membership():
    A = ControlSet([-1.0, 0.0, 1.0])
    np.testing.assert_array_equal(A.project([[0.4], [-0.6], [0.5]])[:, 0], [0.0, -1.0, 0.0])
    assert A.contains([[1.0], [0.3]]).tolist() == [True, False]
    with pytest.raises(ValueError):
        ControlSet(np.empty((0, 1)))
    with pytest.raises(ValueError):
        ControlSet([0.0, 3.0], box=((-1.0, 1.0),))


def test_constant_policy_rejects_foreign_action():
    with pytest.raises(ValueError):
        FeedbackPolicy.constant(0.5, ControlSet([0.0, 1.0]))


@given(st.lists(st.floats(-50, 50, allow_nan=False), min_size=1, max_size=20))
def test_callable_policy_always_in_control_set(xs):
    A = ControlSet([-1.0, 0.25, 2.0])
    pol = FeedbackPolicy.from_callable(lambda t, x, f: np.sin(x) * 3, A)
    a = pol.action(0.0, np.array(xs).reshape(-1, 1), np.zeros((len(xs), 0)))
    assert np.all(A.contains(a))


def test_coefficient_maps():
    x = np.array([[0.0], [1.0], [2.0]])
    f = np.zeros((3, 0))
    a = np.array([[0.5], [0.5], [2.0]])
    np.testing.assert_allclose(Affine((), c0=1.0, cx=2.0, ca=1.0)(x, f, a), [1.5, 3.5, 7.0])
    np.testing.assert_allclose(Table([0.0, 2.0], [1.0, 3.0], ())(x, f, a), [1.0, 2.0, 3.0])
    assert Constant(2.0, (1, 1))(x, f, a).shape == (3, 1, 1)
    np.testing.assert_allclose(FromCallable(lambda x, f, a: x[:, 0] * a[:, 0], ())(x, f, a), [0.0, 0.5, 4.0])


def test_audit_detects_negative_gamma_and_bad_bounds():
    A = ControlSet([0.0])
    rng = np.random.default_rng(0)
    good = Coefficients(1, 1, 1, Affine((1,), cx=0.5), 1.0, 1.0, bounds={"b": 5.0}, lipschitz=0.5)
    rep = good.audit(A, rng)
    assert rep["gamma_nonnegative"] and rep["bounds_ok"] and rep["lipschitz_ok"]
    bad = Coefficients(1, 1, 1, 0.0, 0.0, Affine((), cx=1.0), bounds={"gamma": 1.0})
    rep = bad.audit(A, rng)
    assert not rep["gamma_nonnegative"] and not rep["bounds_ok"]


def test_nan_coefficient_raises():
    c = Coefficients(1, 1, 1, FromCallable(lambda x, f, a: np.full((x.shape[0], 1), np.nan), (1,)), 0.0, 1.0)
    with pytest.raises(FloatingPointError):
        c.evaluate(np.zeros((1, 1)), np.zeros((1, 0)), np.zeros((1, 1)))


def test_cost_growth_audit():
    from superctl.calculus import CylindricalFunction, exp_neg
    from superctl.measure_space import default_family

    cost = CostSpec(CylindricalFunction.from_scalar(exp_neg(1.0), constant_function(1.0)), growth_constant=1.0)
    states = [AtomicMeasure.dirac(x, m, 4) for x in (-1.0, 0.0, 2.0) for m in (1, 4, 9)]
    assert cost.audit_growth(default_family(), states, ControlSet([0.0]))


# -- properties --------------------------------------------------------------

_coeffs = Coefficients(1, 1, 1, Affine((1,), c0=0.3, cx=-0.5, ca=1.0), Affine((1, 1), c0=0.7, cx=0.2), 1.0)


@given(st.floats(-3, 3), st.floats(-2, 2), st.floats(-2, 2), st.sampled_from([-1.0, 1.0]))
def test_generator_linear_in_phi(x, alpha, beta, a):
    f, g = gaussian_function(0.2, 1.1), gaussian_function(-0.7, 0.6)
    h = TestFunction(lambda y: alpha * f.eval(y) + beta * g.eval(y),
                     lambda y: alpha * f.grad(y) + beta * g.grad(y),
                     lambda y: alpha * f.hess(y) + beta * g.hess(y), 1, 1.0, 1.0, "combo", {})
    lam = AtomicMeasure.dirac(0.0)
    lhs = generator_L(h, [x], lam, [a], _coeffs)
    rhs = alpha * generator_L(f, [x], lam, [a], _coeffs) + beta * generator_L(g, [x], lam, [a], _coeffs)
    assert lhs == pytest.approx(rhs, abs=1e-12)


@given(st.floats(-3, 3), st.sampled_from([-1.0, 1.0]))
def test_generator_kills_constants(x, a):
    assert generator_L(constant_function(1.0), [x], AtomicMeasure.dirac(0.0), [a], _coeffs) == 0.0


@given(atomic_measures(), atomic_measures(), st.floats(-3, 3))
def test_generator_measure_free_ignores_measure(m1, m2, x):
    phi = gaussian_function(0.1, 0.9)
    assert generator_L(phi, [x], m1, [1.0], _coeffs) == generator_L(phi, [x], m2, [1.0], _coeffs)
