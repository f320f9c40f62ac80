from __future__ import annotations

import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from superctl.hjb_solver import (
    GridSpec,
    OutOfDomainError,
    StabilityError,
    extract_policy,
    hamiltonian,
    residual_check,
    solve_w,
    solve_w_tilde,
    stable_nt,
    value_of_measure,
)
from superctl.measure_space import AtomicMeasure, constant_function, gaussian_function
from superctl.model import Affine, Coefficients, ControlSet, measure_free_coefficients
from superctl.oracles import gaussian_heat, heat_convolution, riccati_w

from conftest import atomic_measures

A0 = ControlSet([0.0])
BUMP = gaussian_function(0.0, 1.0, box=[(-10, 10)])


def riccati_surface(gamma=1.0, theta=1.0, nt=1001):
    return solve_w(measure_free_coefficients(gamma=gamma), constant_function(theta),
                   GridSpec(-1.0, 1.0, 3, nt), A0)


def heat_surface(nx=401, sigma=math.sqrt(2.0), h=BUMP, T=1.0):
    dx = 20.0 / (nx - 1)
    nt = stable_nt(0.0, T, dx, sigma**2, 0.0)
    c = measure_free_coefficients(0.0, sigma, 0.0)
    return solve_w(c, h, GridSpec(-10.0, 10.0, nx, nt, 0.0, T), A0)


def test_terminal_only_grid():
    s = solve_w(measure_free_coefficients(gamma=1.0), BUMP, GridSpec(-3, 3, 31, 1, 1.0, 1.0), A0)
    np.testing.assert_array_equal(s.w[0], BUMP.eval(s.xs.reshape(-1, 1)))
    assert s.policy.shape == (1, 31)


def test_riccati_closed_form_and_residual():
    s = riccati_surface(nt=10_001)
    exact = riccati_w(1.0, 1.0, 1.0 - s.ts)
    assert np.max(np.abs(s.w - exact[:, None])) <= 1e-6
    assert residual_check(s, measure_free_coefficients(gamma=1.0)).max_abs <= 1e-6


def test_constant_h_without_dynamics_has_zero_residual():
    c = measure_free_coefficients(0.0, 0.0, 0.0)
    s = solve_w(c, constant_function(0.7), GridSpec(-1, 1, 5, 50), A0)
    assert np.all(s.w == 0.7)
    assert residual_check(s, c).max_abs == 0.0


def test_heat_oracle_and_convergence_order():
    s = heat_surface()
    inner = np.abs(s.xs) <= 5.0
    err = np.max(np.abs(s.w[0] - gaussian_heat(s.xs, 2.0))[inner])
    assert err <= 1e-3
    # quadrature oracle agrees with the closed form
    np.testing.assert_allclose(heat_convolution(lambda y: np.exp(-y**2), s.xs[inner], 2.0),
                               gaussian_heat(s.xs[inner], 2.0), atol=1e-12)
    errs = []
    for nx in (51, 101, 201):
        si = heat_surface(nx)
        keep = np.abs(si.xs) <= 5.0
        errs.append(np.max(np.abs(si.w[0] - gaussian_heat(si.xs, 2.0))[keep]))
    r1, r2 = errs[0] / errs[1], errs[1] / errs[2]
    assert 3.0 <= r1 <= 5.0 and 3.0 <= r2 <= 5.0


def test_heat_residual_decreases_under_refinement():
    c = measure_free_coefficients(0.0, math.sqrt(2.0), 0.0)
    r = [residual_check(heat_surface(nx), c).max_abs for nx in (51, 101, 201)]
    assert r[1] < r[0] and r[2] < r[1]


def test_stability_is_enforced():
    c = measure_free_coefficients(0.0, 1.0, 0.0)
    with pytest.raises(StabilityError):
        solve_w(c, BUMP, GridSpec(-10, 10, 401, 20), A0)
    with pytest.raises(StabilityError):
        GridSpec(-10, 10, 401, 20, sigma2_max=1.0)


def test_branching_control_prefers_low_rate():
    c = Coefficients(1, 1, 1, 0.0, 0.0, Affine((), ca=1.0))
    A = ControlSet([0.5, 2.0])
    s = solve_w(c, constant_function(1.0), GridSpec(-1, 1, 3, 1001), A)
    assert np.all(A.points[s.policy][..., 0] == 0.5)
    assert s.w[0, 1] == pytest.approx(1 / 1.25, abs=1e-9)
    # brute force over the two controls with independent Riccati solves
    w_low, w_high = riccati_w(1.0, 0.5, 1.0), riccati_w(1.0, 2.0, 1.0)
    assert w_low > w_high
    pol = extract_policy(s)
    assert np.all(pol.action(0.3, np.array([[0.0], [0.9]]), np.zeros((2, 0))) == 0.5)


def test_drift_control_policy_follows_gradient_sign():
    c = Coefficients(1, 1, 1, Affine((1,), ca=1.0), 0.3, 0.0)
    A = ControlSet([-1.0, 1.0])
    h = gaussian_function(1.0, 1.0, box=[(-10, 10)])
    dx = 0.05
    s = solve_w(c, h, GridSpec(-5, 5, 201, stable_nt(0, 1, dx, 0.09, 1.0)), A)
    k = 0
    slope = np.gradient(s.w[k + 1], s.xs)
    clear = np.abs(slope) > 1e-3
    chosen = A.points[s.policy[k], 0]
    assert np.all(chosen[clear] == np.sign(slope[clear]))


def test_singleton_control_gives_constant_policy():
    s = riccati_surface()
    assert extract_policy(s).action(0.0, np.zeros((3, 1)), np.zeros((3, 0))).tolist() == [[0.0]] * 3


def test_value_of_measure_examples():
    s = riccati_surface(nt=10_001)
    assert value_of_measure(s, 0.0, AtomicMeasure.zero()) == 1.0
    assert value_of_measure(s, 0.0, AtomicMeasure.dirac(0.0)) == pytest.approx(math.exp(-2 / 3), abs=1e-7)
    with pytest.raises(OutOfDomainError):
        value_of_measure(s, 0.0, AtomicMeasure.dirac(3.0))
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        value_of_measure(s, 0.33333, AtomicMeasure.dirac(0.0))
    assert any("grid node" in str(r.message) for r in rec)


def test_w_tilde_agrees_with_w():
    c = measure_free_coefficients(0.0, 1.0, 1.0)
    gaps = []
    for refine in (1, 4):
        grid = GridSpec(-10, 10, 201, (stable_nt(0, 1, 0.1, 1.0, 0.0) - 1) * refine + 1)
        gaps.append(np.max(np.abs(solve_w_tilde(c, BUMP, grid, A0) - solve_w(c, BUMP, grid, A0).w)))
    # both march the same PDE; the discrepancy is first order in dt
    assert gaps[0] <= 1e-3
    assert 3.0 <= gaps[0] / gaps[1] <= 5.0


def test_surface_exports():
    s = riccati_surface(nt=5)
    text = s.to_csv("abc")
    lines = text.splitlines()
    assert lines[0] == "# superctl config_hash=abc" and lines[1] == "t,x,w,policy_index"
    assert len(lines) == 2 + 5 * 3
    assert '"nx": 3' in s.to_json()


# -- properties --------------------------------------------------------------

_grid = GridSpec(-4.0, 4.0, 41, 201, 0.0, 1.0)


def _coeffs(g, s, b):
    return Coefficients(1, 1, 1, Affine((1,), c0=b, ca=1.0), s, Affine((), c0=g, cx=0.05, ca=0.2))


_params = st.tuples(st.floats(0.5, 2.0), st.floats(0.0, 1.0), st.floats(-0.5, 0.5),
                    st.floats(-2.0, 2.0), st.floats(0.3, 2.0), st.floats(0.1, 1.0))


@settings(max_examples=25)
@given(_params)
def test_bounds_terminal_and_control_consistency(p):
    g, s, b, c0, sc, amp = p
    c = _coeffs(g, s, b)
    A = ControlSet([-0.5, 0.0, 0.5])
    h = gaussian_function(c0, sc, amp, box=[(-4, 4)])
    surf = solve_w(c, h, _grid, A)
    assert np.array_equal(surf.w[-1], h.eval(surf.xs.reshape(-1, 1)))
    assert surf.w.min() >= 0.0 and surf.w.max() <= amp * (1 + 1e-12)
    for k in (0, 57, 199):
        H = hamiltonian(surf, c, k)
        best = H.max(axis=0)
        np.testing.assert_array_equal(H[surf.policy[k], np.arange(_grid.nx)], best)
        assert np.all(np.argmax(H, axis=0) == surf.policy[k])


@settings(max_examples=20)
@given(_params)
def test_comparison_in_gamma(p):
    g, s, b, c0, sc, amp = p
    A = ControlSet([-0.5, 0.5])
    h = gaussian_function(c0, sc, amp, box=[(-4, 4)])
    lo = solve_w(_coeffs(g, s, b), h, _grid, A).w
    hi = solve_w(_coeffs(2 * g, s, b), h, _grid, A).w
    assert np.all(hi <= lo + 1e-12)


@settings(max_examples=20)
@given(st.floats(0.1, 3.0), st.floats(0.1, 3.0))
def test_riccati_bounds_at_constant_data(g, theta):
    s = solve_w(measure_free_coefficients(gamma=g), constant_function(theta), GridSpec(-1, 1, 3, 101), A0)
    lower = theta / (1 + g * theta * (1 - s.ts) / 2)
    assert np.all(s.w >= lower[:, None] - 1e-12) and np.all(s.w <= theta)


_heat = heat_surface(nx=201, sigma=1.0)


@given(atomic_measures(lo=-5, hi=5), atomic_measures(lo=-5, hi=5))
def test_branching_property(a, b):
    va, vb = value_of_measure(_heat, 0.0, a), value_of_measure(_heat, 0.0, b)
    assert value_of_measure(_heat, 0.0, a + b) == pytest.approx(va * vb, rel=1e-12)


@given(atomic_measures(lo=-5, hi=5))
def test_doubling_squares_the_value(lam):
    v = value_of_measure(_heat, 0.0, lam)
    assert value_of_measure(_heat, 0.0, lam.scale(2)) == pytest.approx(v * v, rel=1e-12)
