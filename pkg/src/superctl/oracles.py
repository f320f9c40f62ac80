"""Independent reference solutions used to check the solvers and simulators.

Nothing here calls the production simulator or PDE solver.  The oracles are

* closed forms for the Feller / continuous-state branching process (CSBP),
* Gauss-Hermite quadrature for heat-kernel convolutions,
* the exact Laplace functional of the discrete branching scheme (probability
  generating function iteration),
* a Gillespie event-driven simulator for pure branching,
* finite-difference measure-perturbation derivatives,
* quadrature of the variance decomposition of ``<phi, mu_T>`` for branching
  Brownian motion started from a point mass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate

from .measure_space import AtomicMeasure, TestFunction, function_from_callables


# ---------------------------------------------------------------------------
# Feller diffusion / CSBP
# ---------------------------------------------------------------------------


def riccati_w(theta: float, gamma: float, s) -> np.ndarray:
    """Solution of ``w' = -gamma w^2 / 2`` backwards from ``theta`` over time-to-go ``s``."""
    s = np.asarray(s, float)
    return theta / (1.0 + 0.5 * gamma * theta * s)


def csbp_laplace(z: float, theta: float, gamma: float, s: float) -> float:
    """``E exp(-theta Z_s)`` for the Feller diffusion ``dZ = sqrt(gamma Z) dW`` with ``Z_0 = z``."""
    return math.exp(-z * float(riccati_w(theta, gamma, s)))


def csbp_extinction(z: float, gamma: float, s: float) -> float:
    """``P(Z_s = 0)`` for the same Feller diffusion."""
    return math.exp(-2.0 * z / (gamma * s))


# ---------------------------------------------------------------------------
# Heat kernel
# ---------------------------------------------------------------------------


def heat_convolution(h, x, variance: float, nodes: int = 80) -> np.ndarray:
    """``E h(x + sqrt(variance) Z)`` by Gauss-Hermite quadrature."""
    x = np.asarray(x, float)
    if variance == 0:
        return np.asarray(h(x), float)
    y, w = np.polynomial.hermite.hermgauss(nodes)
    pts = x[..., None] + math.sqrt(2.0 * variance) * y
    return np.sum(w * h(pts), axis=-1) / math.sqrt(math.pi)


def gaussian_heat(x, s: float, center: float = 0.0, scale: float = 1.0) -> np.ndarray:
    """Closed form of ``E g(x + sqrt(s) Z)`` for ``g(x) = exp(-(x - c)^2 / scale^2)``."""
    x = np.asarray(x, float)
    den = scale**2 + 2.0 * s
    return scale / math.sqrt(den) * np.exp(-((x - center) ** 2) / den)


# ---------------------------------------------------------------------------
# Exact law of the discrete branching scheme
# ---------------------------------------------------------------------------


def scheme_event_probability(n: int, gamma: float, dt: float) -> float:
    return -math.expm1(-n * gamma * dt)


def scheme_laplace(n: int, units: int, theta: float, gamma: float, dt: float, steps: int) -> float:
    """``E exp(-theta <1, mu_T>)`` for the per-step scheme without motion.

    Each unit independently dies or splits with probability ``p/2`` each, so
    the unit count is a Galton-Watson process with offspring generating
    function ``g(s) = p/2 + (1 - p) s + p s^2 / 2``.
    """
    p = scheme_event_probability(n, gamma, dt)
    s = math.exp(-theta / n)
    for _ in range(steps):
        s = 0.5 * p + (1.0 - p) * s + 0.5 * p * s * s
    return s**units


def scheme_extinction(n: int, units: int, gamma: float, dt: float, steps: int) -> float:
    """Probability that the scheme's unit count hits zero within ``steps``."""
    p = scheme_event_probability(n, gamma, dt)
    s = 0.0
    for _ in range(steps):
        s = 0.5 * p + (1.0 - p) * s + 0.5 * p * s * s
    return s**units


def scheme_mass_variance(n: int, mass: float, gamma: float, dt: float, steps: int) -> float:
    """``Var <1, mu_T>`` of the scheme: each unit-step adds offspring variance ``p``."""
    p = scheme_event_probability(n, gamma, dt)
    return steps * p * mass / n


def bias_constant(gamma: float, theta: float, mass: float, T: float, dt: float, levels=(10, 50)) -> float:
    """``max_n n |E_scheme exp(-theta <1, mu_T>) - CSBP limit|`` over ``levels``.

    Calibrates the finite-n allowance ``kappa / n`` used against limit oracles.
    """
    steps = int(round(T / dt))
    limit = csbp_laplace(mass, theta, gamma, T)
    worst = 0.0
    for n in levels:
        units = int(round(mass * n))
        exact = scheme_laplace(n, units, theta, gamma, dt, steps)
        worst = max(worst, n * abs(exact - limit))
    return worst


# ---------------------------------------------------------------------------
# Event-driven pure branching
# ---------------------------------------------------------------------------


@dataclass
class GillespiePath:
    mass_T: float
    mass_integral: float  # int_0^T <1, mu_r> dr
    square_jump_sum: float  # sum over events of (Delta F(<1, mu>))^2 for F(y) = y^2


def gillespie_branching(n: int, units: int, gamma: float, T: float, rng: np.random.Generator) -> GillespiePath:
    """Exact continuous-time critical binary branching of ``units`` particles of mass ``1/n``.

    The total event rate is ``n gamma k`` for ``k`` live units.  Records the
    terminal mass, the time integral of the mass and the realised quadratic
    variation of ``<1, mu>^2``.
    """
    t, k = 0.0, units
    integral = 0.0
    sq = 0.0
    while k > 0:
        wait = rng.exponential(1.0 / (n * gamma * k))
        if t + wait >= T:
            break
        integral += wait * k / n
        t += wait
        k_new = k + (1 if rng.random() < 0.5 else -1)
        sq += ((k_new / n) ** 2 - (k / n) ** 2) ** 2
        k = k_new
    integral += (T - t) * k / n
    return GillespiePath(k / n, integral, sq)


# ---------------------------------------------------------------------------
# Measure-perturbation finite differences
# ---------------------------------------------------------------------------


def fd_flat_derivative(u, lam: AtomicMeasure, x, eps: float = 1e-6) -> float:
    """Richardson-extrapolated ``(u(lam + eps delta_x) - u(lam)) / eps``."""
    base = u(lam)

    def quotient(e):
        return (u(lam.add_atom(x, e)) - base) / e

    return 2.0 * quotient(eps / 2) - quotient(eps)


def fd_second_flat_derivative(u, lam: AtomicMeasure, x, y, eps: float = 1e-4) -> float:
    """Nested difference ``[u(l + e dx + e dy) - u(l + e dx) - u(l + e dy) + u(l)] / e^2``, Richardson."""
    base = u(lam)

    def quotient(e):
        lx, ly = lam.add_atom(x, e), lam.add_atom(y, e)
        return (u(lx.add_atom(y, e)) - u(lx) - u(ly) + base) / e**2

    return 2.0 * quotient(eps / 2) - quotient(eps)


def fd_intrinsic_derivative(flat, x, h: float = 1e-5) -> np.ndarray:
    """Central difference in ``x`` of a flat-derivative map ``flat(x) -> float``."""
    x = np.atleast_1d(np.asarray(x, float))
    out = np.empty_like(x)
    for j in range(x.shape[0]):
        e = np.zeros_like(x)
        e[j] = h
        out[j] = (flat(x + e) - flat(x - e)) / (2 * h)
    return out


# ---------------------------------------------------------------------------
# Random cylindrical test problems
# ---------------------------------------------------------------------------


class _SinQuadOuter:
    """``F(y) = alpha sin(beta . y) + y^T Q y / 2 + c . y``."""

    def __init__(self, alpha, beta, Q, c):
        self.alpha, self.beta, self.Q, self.c = float(alpha), np.asarray(beta), np.asarray(Q), np.asarray(c)

    def value(self, y):
        y = np.asarray(y, float)
        return (self.alpha * np.sin(y @ self.beta) + 0.5 * np.einsum("...i,ij,...j->...", y, self.Q, y)
                + y @ self.c)

    def grad(self, y):
        y = np.asarray(y, float)
        return self.alpha * np.cos(y @ self.beta)[..., None] * self.beta + y @ self.Q + self.c

    def hess(self, y):
        y = np.asarray(y, float)
        s = -self.alpha * np.sin(y @ self.beta)[..., None, None]
        return s * np.outer(self.beta, self.beta) + self.Q


def random_cylindrical(rng: np.random.Generator, box=(-10.0, 10.0)):
    """A random ``F(<f_1, .>, ..., <f_p, .>)`` with Gaussian-bump inner functions (d = 1)."""
    from .calculus import CylindricalFunction
    from .measure_space import gaussian_function

    p = int(rng.integers(1, 4))
    inner = tuple(
        gaussian_function(rng.uniform(-2, 2), rng.uniform(0.5, 2.0), rng.uniform(0.2, 1.0), box=[box])
        for _ in range(p)
    )
    A = rng.normal(size=(p, p))
    outer = _SinQuadOuter(rng.uniform(0.5, 2.0), rng.normal(size=p), 0.5 * (A + A.T), rng.normal(size=p))
    return CylindricalFunction(outer.value, outer.grad, outer.hess, inner, name="random")


def random_atomic_measure(rng: np.random.Generator, max_atoms: int = 5, level: int | None = None) -> AtomicMeasure:
    n = int(level or rng.integers(1, 10))
    k = int(rng.integers(1, max_atoms + 1))
    return AtomicMeasure(n, rng.uniform(-2, 2, size=(k, 1)), rng.integers(1, 4, size=k))


# ---------------------------------------------------------------------------
# Variance decomposition for branching Brownian motion
# ---------------------------------------------------------------------------


def bbm_gaussian_variance(x0: float, mass: float, T: float, gamma: float = 1.0, sigma: float = 1.0,
                          scale: float = 1.0) -> tuple[float, float]:
    """``(v_inf, c)`` with ``Var <phi, mu_T> = v_inf + c / n`` for ``phi = exp(-x^2 / scale^2)``.

    Branching Brownian motion with volatility ``sigma``, critical binary
    branching at rate ``n gamma`` per unit of mass ``1/n``, started from
    ``mass * delta_{x0}``:

    * ``v_inf = int_0^T E[gamma (P_{T-r} phi)^2 (x0 + sigma B_r)] dr``
    * ``c     = int_0^T E[sigma^2 |D P_{T-r} phi|^2 (x0 + sigma B_r)] dr``

    with the heat semigroup in closed form and the outer expectation by
    Gauss-Hermite quadrature.
    """

    def P(s, x):
        return gaussian_heat(x, sigma**2 * s, 0.0, scale)

    def DP(s, x):
        den = scale**2 + 2.0 * sigma**2 * s
        return -2.0 * x / den * P(s, x)

    def integrand_v(r):
        return gamma * float(heat_convolution(lambda y: P(T - r, y) ** 2, x0, sigma**2 * r))

    def integrand_c(r):
        return sigma**2 * float(heat_convolution(lambda y: DP(T - r, y) ** 2, x0, sigma**2 * r))

    v, _ = integrate.quad(integrand_v, 0.0, T, epsabs=1e-13, epsrel=1e-11, limit=200)
    c, _ = integrate.quad(integrand_c, 0.0, T, epsabs=1e-13, epsrel=1e-11, limit=200)
    return mass * v, mass * c


def gaussian_phi(scale: float = 1.0, box=(-10.0, 10.0)) -> TestFunction:
    """``exp(-x^2 / scale^2)`` built from independent callables (for cross-checks)."""
    s2 = scale**2
    return function_from_callables(
        lambda x: np.exp(-x[:, 0] ** 2 / s2),
        lambda x: (-2 * x[:, 0] / s2 * np.exp(-x[:, 0] ** 2 / s2))[:, None],
        lambda x: ((4 * x[:, 0] ** 2 / s2**2 - 2 / s2) * np.exp(-x[:, 0] ** 2 / s2))[:, None, None],
        1,
        [box],
        name="exp(-x^2)",
    )
