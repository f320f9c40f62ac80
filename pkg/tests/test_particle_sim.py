from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from superctl.calculus import identity, square
from superctl.measure_space import AtomicMeasure, constant_function, gaussian_function
from superctl.model import Coefficients, ControlSet, FeedbackPolicy, FromCallable, measure_free_coefficients
from superctl.oracles import csbp_extinction, gillespie_branching, scheme_extinction, scheme_mass_variance
from superctl.particle_sim import (
    Pairing,
    SimConfig,
    SimulationError,
    block_rng,
    martingale_diagnostic,
    martingale_probes,
    simulate,
    simulate_batch,
    step,
)

ONE = constant_function(1.0)
A0 = ControlSet([0.0])
POL = FeedbackPolicy.constant(0.0, A0)
MASS = Pairing(ONE, "mass")
X1 = Pairing(gaussian_function(0.0, 1.0), "g")


def pure_branching(gamma=1.0):
    return measure_free_coefficients(0.0, 0.0, gamma)


def test_step_without_branching_keeps_units():
    c = measure_free_coefficients(0.3, 1.0, 0.0)
    cfg = SimConfig(level=4, dt=0.01, T=1.0)
    lam = AtomicMeasure(4, [[0.0], [1.0]], [3, 2])
    rng = block_rng(1, 0, 0)
    for k in range(50):
        lam = step(lam, 0.01 * k, POL, cfg, c, rng)
        assert lam.n_units == 5


def test_zero_steps_returns_initial_measure():
    lam = AtomicMeasure(3, [[0.5], [-1.0]], [2, 4])
    rec = simulate(None, lam, POL, SimConfig(level=3, dt=0.01, T=0.0), pure_branching())
    assert rec.final_measure == lam
    assert rec.extinct_at is None and not rec.censored


def test_gamma_zero_mass_constant_in_batch():
    c = measure_free_coefficients(0.0, 1.0, 0.0)
    cfg = SimConfig(level=5, dt=0.01, T=1.0, replicates=50, record=(MASS,), record_steps=True)
    res = simulate_batch(None, AtomicMeasure.dirac(0.0, 7, 5), POL, cfg, c)
    assert np.all(res.column("mass") == 1.4)
    assert np.all(res.births == 0) and np.all(res.deaths == 0)


def test_criticality_and_second_moment_n1():
    cfg = SimConfig(level=1, dt=1e-3, T=1.0, seed=3, replicates=10_000, record=(MASS,))
    res = simulate_batch(None, AtomicMeasure.dirac(0.0), POL, cfg, pure_branching())
    m = res.terminal("mass")
    se = m.std(ddof=1) / math.sqrt(m.size)
    assert abs(m.mean() - 1.0) <= 3 * se
    m2 = m**2
    se2 = m2.std(ddof=1) / math.sqrt(m.size)
    # exact second moment of the scheme (variance slightly below 1 by the thinning factor)
    target = 1.0 + scheme_mass_variance(1, 1.0, 1.0, 1e-3, 1000)
    assert target == pytest.approx(2.0, abs=1e-3)
    assert abs(m2.mean() - target) <= 3 * se2


def test_brownian_location_variance():
    c = measure_free_coefficients(0.0, 1.0, 0.0)
    cfg = SimConfig(level=1, dt=0.01, T=1.0, seed=11, replicates=10_000)
    res = simulate_batch(None, AtomicMeasure.dirac(0.0), POL, cfg, c)
    x = res.final_x[np.argsort(res.final_rep), 0]
    v = x.var(ddof=1)
    se = math.sqrt((np.mean((x - x.mean()) ** 4) - v**2) / x.size)
    assert abs(v - 1.0) <= 3 * se


def test_extinction_probability_matches_scheme_and_csbp():
    n, R = 50, 4000
    cfg = SimConfig(level=n, dt=1e-3, T=1.0, seed=5, replicates=R, block_size=1000)
    res = simulate_batch(None, AtomicMeasure.dirac(0.0, n, n), POL, cfg, pure_branching())
    p_hat = float(np.mean(~np.isnan(res.extinct_at)))
    exact = scheme_extinction(n, n, 1.0, 1e-3, 1000)
    se = math.sqrt(exact * (1 - exact) / R)
    assert abs(p_hat - exact) <= 3 * se
    # limit oracle with a finite-n allowance
    assert abs(p_hat - csbp_extinction(1.0, 1.0, 1.0)) <= 3 * se + 1.0 / n


def test_determinism_and_single_replicate_agreement():
    c = measure_free_coefficients(0.1, 0.7, 1.0)
    cfg = SimConfig(level=10, dt=0.01, T=0.5, seed=99, replicates=30, block_size=8, record=(MASS, X1),
                    record_steps=True)
    lam = AtomicMeasure(10, [[0.0], [1.0]], [6, 4])
    a = simulate_batch(None, lam, POL, cfg, c)
    b = simulate_batch(None, lam, POL, cfg, c)
    assert np.array_equal(a.values, b.values) and np.array_equal(a.final_x, b.final_x)
    for r in (0, 9, 29):
        rec = simulate(None, lam, POL, cfg, c, replicate=r)
        assert np.array_equal(rec.functional_values, a.values[r])
        assert rec.final_measure == a.final_measure(r)


def test_parallel_workers_reproduce_serial():
    c = measure_free_coefficients(0.0, 1.0, 1.0)
    cfg = SimConfig(level=10, dt=0.01, T=0.5, seed=2, replicates=40, block_size=10, record=(MASS, X1))
    lam = AtomicMeasure.dirac(0.0, 10, 10)
    a = simulate_batch(None, lam, POL, cfg, c, workers=1)
    b = simulate_batch(None, lam, POL, cfg, c, workers=2)
    assert a.summary_rows() == b.summary_rows()


@settings(max_examples=15)
@given(st.permutations([0, 1, 2]))
def test_exchangeability_of_initial_atoms(perm):
    locs = np.array([[-1.0], [0.0], [2.0]])
    mult = np.array([1, 3, 2])
    c = measure_free_coefficients(0.0, 1.0, 1.0)
    cfg = SimConfig(level=6, dt=0.01, T=0.2, seed=8, replicates=5, record=(X1,))
    ref = simulate_batch(None, AtomicMeasure(6, locs, mult), POL, cfg, c)
    p = list(perm)
    got = simulate_batch(None, AtomicMeasure(6, locs[p], mult[p]), POL, cfg, c)
    assert np.array_equal(ref.values, got.values)


def test_guard_refuses_coarse_steps():
    with pytest.raises(ValueError, match="exceeds"):
        simulate_batch(None, AtomicMeasure.dirac(0.0, 50, 50), POL, SimConfig(level=50, dt=0.01, T=1.0),
                       pure_branching())


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(level=0, dt=0.1, T=1.0)
    with pytest.raises(ValueError):
        SimConfig(level=1, dt=0.3, T=1.0)
    with pytest.raises(ValueError):
        SimConfig(level=1, dt=0.1, T=1.0, t0=2.0)


def test_nan_coefficient_is_hard_failure_with_state():
    bad = Coefficients(1, 1, 1, FromCallable(lambda x, f, a: np.where(x > 0.5, np.nan, 0.0), (1,)), 1.0, 0.0)
    cfg = SimConfig(level=2, dt=0.01, T=1.0, seed=1, replicates=3)
    with pytest.raises(SimulationError, match="state"):
        simulate_batch(None, AtomicMeasure.dirac(0.0, 2, 2), POL, cfg, bad)


def test_mass_cap_censors_runs():
    cfg = SimConfig(level=1, dt=1e-2, T=2.0, seed=4, replicates=400, mass_cap=3.0, record=(MASS,))
    res = simulate_batch(None, AtomicMeasure.dirac(0.0), POL, cfg, pure_branching())
    assert res.n_censored > 0
    assert np.all(np.isnan(res.terminal("mass")[res.censored]))
    assert np.all(np.isfinite(res.terminal("mass")[~res.censored]))


def test_event_counts_nonnegative_and_consistent():
    cfg = SimConfig(level=10, dt=1e-3, T=0.5, seed=6, replicates=200, record=(MASS,), record_steps=True)
    res = simulate_batch(None, AtomicMeasure.dirac(0.0, 10, 10), POL, cfg, pure_branching())
    assert res.births.min() >= 0 and res.deaths.min() >= 0
    units = 10 + res.births.sum(axis=1) - res.deaths.sum(axis=1)
    np.testing.assert_allclose(units / 10, res.terminal("mass"))


# -- martingale diagnostics ----------------------------------------------------


def _recorded(F, phi, n, coeffs, R, seed=0, dt=1e-2, lam=None):
    cfg = SimConfig(level=n, dt=dt, T=1.0, seed=seed, replicates=R, record=martingale_probes(F, phi, n),
                    record_steps=True)
    lam = lam or AtomicMeasure.dirac(0.0, n, n)
    return simulate_batch(None, lam, POL, cfg, coeffs)


def test_diagnostic_refuses_small_samples():
    res = _recorded(identity(), ONE, 1, pure_branching(), 50)
    with pytest.raises(ValueError, match="at least 100"):
        martingale_diagnostic(res, identity(), ONE, 1)


def test_diagnostic_static_system_is_exactly_zero():
    res = _recorded(square(), gaussian_function(0.0), 2, measure_free_coefficients(0.0, 0.0, 0.0), 100)
    rep = martingale_diagnostic(res, square(), gaussian_function(0.0), 2)
    assert rep.z == 0.0 and rep.mean_terminal == 0.0


def test_diagnostic_accepts_trajectory_records():
    c = pure_branching()
    cfg = SimConfig(level=1, dt=1e-2, T=1.0, seed=0, replicates=120,
                    record=martingale_probes(identity(), ONE, 1), record_steps=True)
    res = simulate_batch(None, AtomicMeasure.dirac(0.0), POL, cfg, c)
    a = martingale_diagnostic(res, identity(), ONE, 1)
    b = martingale_diagnostic(res.records(), identity(), ONE, 1)
    assert a.z == pytest.approx(b.z, rel=1e-12)


def test_mass_martingale_z_within_three():
    res = _recorded(identity(), ONE, 1, pure_branching(), 10_000, seed=21, dt=1e-3 * 5)
    rep = martingale_diagnostic(res, identity(), ONE, 1)
    assert abs(rep.z) <= 3.0


def test_quadratic_variation_ratio_against_event_driven_oracle():
    n, R = 1, 10_000
    res = _recorded(square(), ONE, n, pure_branching(), R, seed=31)
    rep = martingale_diagnostic(res, square(), ONE, n)
    # event-driven ground truth for the realised quadratic variation of <1, mu>^2
    rng = np.random.default_rng(17)
    paths = [gillespie_branching(n, 1, 1.0, 1.0, rng) for _ in range(20_000)]
    sq = np.array([p.square_jump_sum for p in paths])
    assert abs(rep.qv_empirical - sq.mean()) <= 4 * math.hypot(sq.std() / math.sqrt(sq.size),
                                                                 rep.qv_empirical * rep.qv_ratio_exact_se)
    # exact compensator of the squared jumps: ratio 1 within 5%
    assert abs(rep.qv_ratio_exact - 1.0) <= 0.05
    # the superprocess-form integrand omits the jump-size correction: 13/12 at n = 1
    assert rep.qv_ratio == pytest.approx(13 / 12, rel=0.05)
    assert abs(rep.z) <= 3.5


def test_martingale_with_motion_and_gaussian_phi():
    c = measure_free_coefficients(0.2, 1.0, 1.0)
    F = identity()
    phi = gaussian_function(0.0, 1.0)
    res = _recorded(F, phi, 4, c, 4000, seed=41)
    rep = martingale_diagnostic(res, F, phi, 4)
    assert abs(rep.z) <= 3.5
    assert abs(rep.qv_ratio_exact - 1.0) <= 4 * rep.qv_ratio_exact_se + 0.02
