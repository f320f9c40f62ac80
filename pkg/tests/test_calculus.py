from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from superctl.calculus import (
    CylindricalFunction,
    ScalarFunction,
    apply_bold_L,
    apply_L_n,
    apply_script_L,
    exp_neg,
    flat_derivative,
    identity,
    intrinsic_derivative,
    intrinsic_jacobian,
    polynomial,
    second_flat_derivative,
    square,
)
from superctl.measure_space import AtomicMeasure, constant_function, gaussian_function, pair
from superctl.model import Affine, Coefficients, measure_free_coefficients
from superctl.oracles import (
    fd_flat_derivative,
    fd_intrinsic_derivative,
    fd_second_flat_derivative,
    random_atomic_measure,
    random_cylindrical,
)

from conftest import atomic_measures

phi = gaussian_function(0.0, 1.0)
lam0 = AtomicMeasure(3, [[-0.4], [0.9]], [2, 4])


def test_flat_derivative_of_linear_is_phi():
    u = CylindricalFunction.linear(phi)
    for x in (-1.0, 0.0, 2.5):
        assert flat_derivative(u, lam0, [x]) == pytest.approx(float(phi.eval(np.array([[x]]))[0]), abs=1e-15)


def test_flat_derivative_exp_neg_matches_oracle():
    u = CylindricalFunction.from_scalar(exp_neg(1.0), phi)
    x = 0.3
    expected = -math.exp(-pair(phi, lam0)) * math.exp(-x * x)
    assert flat_derivative(u, lam0, [x]) == pytest.approx(expected, rel=1e-14)
    assert fd_flat_derivative(u, lam0, [x]) == pytest.approx(expected, rel=1e-6)


def test_constant_outer_has_zero_derivatives():
    c = CylindricalFunction.from_scalar(polynomial([3.0]), phi)
    assert flat_derivative(c, lam0, [0.2]) == 0.0
    assert second_flat_derivative(c, lam0, [0.2], [1.0]) == 0.0


def test_second_flat_derivative_examples():
    lin = CylindricalFunction.linear(phi)
    assert second_flat_derivative(lin, lam0, [0.1], [0.7]) == 0.0
    sq = CylindricalFunction.from_scalar(square(), phi)
    fx, fy = math.exp(-0.01), math.exp(-0.49)
    assert second_flat_derivative(sq, lam0, [0.1], [0.7]) == pytest.approx(2 * fx * fy, rel=1e-14)
    assert fd_second_flat_derivative(sq, lam0, [0.1], [0.7]) == pytest.approx(2 * fx * fy, rel=1e-5)
    ex = CylindricalFunction.from_scalar(exp_neg(1.0), phi)
    expected = math.exp(-pair(phi, lam0)) * fx * fy
    assert second_flat_derivative(ex, lam0, [0.1], [0.7]) == pytest.approx(expected, rel=1e-14)
    assert fd_second_flat_derivative(ex, lam0, [0.1], [0.7]) == pytest.approx(expected, rel=1e-5)


def test_intrinsic_derivative_examples():
    lin = CylindricalFunction.linear(phi)
    np.testing.assert_allclose(intrinsic_derivative(lin, lam0, [0.5]), phi.grad(np.array([[0.5]]))[0], rtol=1e-15)
    const_inner = CylindricalFunction.from_scalar(exp_neg(1.0), constant_function(1.0))
    assert np.all(intrinsic_derivative(const_inner, lam0, [0.5]) == 0.0)
    u = CylindricalFunction.from_scalar(exp_neg(1.0), phi)
    val = intrinsic_derivative(u, AtomicMeasure.dirac(0.0), [1.0])[0]
    assert val == pytest.approx(2 * math.exp(-2), rel=1e-14)
    assert val == pytest.approx(0.27067, abs=5e-6)
    fd = fd_intrinsic_derivative(lambda x: flat_derivative(u, AtomicMeasure.dirac(0.0), [x]), [1.0])[0]
    assert fd == pytest.approx(val, rel=1e-8)


def test_bold_L_reduces_to_generator_when_gamma_zero():
    from superctl.model import generator_L

    c = measure_free_coefficients(b=0.4, sigma=1.3, gamma=0.0)
    u = CylindricalFunction.linear(phi)
    assert apply_bold_L(u, [0.6], lam0, [0.0], c) == pytest.approx(generator_L(phi, [0.6], lam0, [0.0], c), abs=1e-15)


def test_bold_L_exponential_constant_phi():
    theta = 0.7
    c = measure_free_coefficients(b=0.0, sigma=0.0, gamma=1.0)
    u = CylindricalFunction.from_scalar(exp_neg(1.0), constant_function(theta))
    expected = 0.5 * math.exp(-theta * lam0.mass) * theta**2
    assert apply_bold_L(u, [0.0], lam0, [0.0], c) == pytest.approx(expected, rel=1e-14)


def test_L_n_linear_is_n_free():
    c = measure_free_coefficients(b=0.4, sigma=1.3, gamma=2.0)
    vals = [apply_L_n(identity(), phi, [0.3], lam0, [0.0], n, c) for n in (1, 7, 1000)]
    assert vals[0] == pytest.approx(vals[1], abs=1e-12) and vals[1] == pytest.approx(vals[2], abs=1e-10)
    assert vals[0] == pytest.approx(apply_script_L(identity(), phi, [0.3], lam0, [0.0], c), abs=1e-12)


@pytest.mark.parametrize("n", [1, 5, 80])
def test_L_n_square_pure_branching(n):
    c = measure_free_coefficients(gamma=1.0)
    x = 0.45
    assert apply_L_n(square(), phi, [x], lam0, [0.0], n, c) == pytest.approx(math.exp(-2 * x * x), rel=1e-9)


def test_L_n_converges_at_rate_one_over_n():
    c = measure_free_coefficients(b=0.2, sigma=0.9, gamma=1.0)
    F = ScalarFunction(lambda y: np.sin(y), lambda y: np.cos(y), lambda y: -np.sin(y), "sin")
    x = 0.2
    s2 = 0.9**2 * phi.grad(np.array([[x]]))[0, 0] ** 2
    base = apply_script_L(F, phi, [x], lam0, [0.0], c)
    y = pair(phi, lam0)
    errs = []
    for n in (10, 100, 1000):
        target = base + 0.5 / n * (-math.sin(y)) * s2
        errs.append(abs(apply_L_n(F, phi, [x], lam0, [0.0], n, c) - target))
    for n, e in zip((10, 100, 1000), errs):
        assert e * n <= 0.1
    assert errs[2] < errs[0]


# -- properties --------------------------------------------------------------


@given(st.integers(0, 2**32 - 1))
def test_random_cylindrical_flat_derivatives_match_oracle(seed):
    rng = np.random.default_rng(seed)
    u = random_cylindrical(rng)
    lam = random_atomic_measure(rng)
    x, y = rng.uniform(-2, 2), rng.uniform(-2, 2)
    d1 = flat_derivative(u, lam, [x])
    assert abs(d1 - fd_flat_derivative(u, lam, [x])) <= 1e-3 * max(1e-3, abs(d1))
    d2 = second_flat_derivative(u, lam, [x], [y])
    assert d2 == pytest.approx(second_flat_derivative(u, lam, [y], [x]), rel=1e-12, abs=1e-15)
    assert abs(d2 - fd_second_flat_derivative(u, lam, [x], [y])) <= 1e-3 * max(1e-3, abs(d2))


@given(st.integers(0, 2**32 - 1))
def test_intrinsic_is_gradient_of_flat(seed):
    rng = np.random.default_rng(seed)
    u = random_cylindrical(rng)
    lam = random_atomic_measure(rng)
    x = rng.uniform(-2, 2)
    Du = intrinsic_derivative(u, lam, [x])[0]
    fd = fd_intrinsic_derivative(lambda z: flat_derivative(u, lam, [z]), [x])[0]
    assert abs(Du - fd) <= 1e-4 * max(1.0, abs(Du))
    J = intrinsic_jacobian(u, lam, [x])[0, 0]
    fdJ = fd_intrinsic_derivative(lambda z: intrinsic_derivative(u, lam, [z])[0], [x])[0]
    assert abs(J - fdJ) <= 1e-4 * max(1.0, abs(J))


@given(st.integers(0, 2**32 - 1), atomic_measures(max_atoms=4))
def test_bold_L_on_F_phi_equals_script_L(seed, lam):
    rng = np.random.default_rng(seed)
    c = Coefficients(1, 1, 1, Affine((1,), c0=rng.normal(), cx=rng.normal(), ca=1.0),
                     Affine((1, 1), c0=rng.uniform(0.2, 1.5), cx=0.3), Affine((), c0=rng.uniform(0, 2), ca=0.5))
    F = polynomial(list(rng.normal(size=4)))
    ph = gaussian_function(rng.uniform(-1, 1), rng.uniform(0.5, 2))
    x, a = [rng.uniform(-2, 2)], [1.0]
    u = CylindricalFunction.from_scalar(F, ph)
    lhs = apply_bold_L(u, x, lam, a, c)
    rhs = apply_script_L(F, ph, x, lam, a, c)
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(rhs))


@given(st.floats(-5, 5), st.floats(-3, 3))
def test_outer_derivatives_audit(y, theta):
    u = CylindricalFunction.from_scalar(exp_neg(theta), phi)
    assert u.check_outer_derivatives(np.array([y]))
