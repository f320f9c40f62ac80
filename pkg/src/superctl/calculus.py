"""Cylindrical functions on measures, their derivatives and the generators.

For ``u(lam) = F(<f_1, lam>, ..., <f_p, lam>)`` the derivatives are closed form:

* flat derivative ``DF(y) . f(x)`` (uncentred representative),
* second flat derivative ``f(y)^T D^2F f(x)``,
* intrinsic derivative ``DF(y)^T Df(x)`` and its spatial Jacobian.

``apply_L_n`` is the generator of the n-rescaled branching diffusion acting on
``F(<phi, .>)``; ``apply_script_L`` its n -> infinity limit and
``apply_bold_L`` the operator acting on general cylindrical functions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .measure_space import AtomicMeasure, TestFunction, pair
from .model import Coefficients, _L_values, features


@dataclass(frozen=True, eq=False)
class ScalarFunction:
    """A C^2 map R -> R with its first two derivatives (all vectorised)."""

    f: Callable
    df: Callable
    d2f: Callable
    name: str = "F"

    def __call__(self, y):
        return self.f(y)


class _Poly:
    def __init__(self, coeffs):
        self.p = np.polynomial.Polynomial(coeffs)
        self.dp = self.p.deriv()
        self.d2p = self.dp.deriv()


class _ExpNeg:
    def __init__(self, theta):
        self.theta = float(theta)

    def f(self, y):
        return np.exp(-self.theta * np.asarray(y, float))

    def df(self, y):
        return -self.theta * self.f(y)

    def d2f(self, y):
        return self.theta**2 * self.f(y)


def identity() -> ScalarFunction:
    return polynomial([0.0, 1.0], name="identity")


def square() -> ScalarFunction:
    return polynomial([0.0, 0.0, 1.0], name="square")


def polynomial(coeffs: Sequence[float], name: str | None = None) -> ScalarFunction:
    p = _Poly(coeffs)
    return ScalarFunction(p.p, p.dp, p.d2p, name or f"poly{list(coeffs)}")


def exp_neg(theta: float = 1.0) -> ScalarFunction:
    e = _ExpNeg(theta)
    return ScalarFunction(e.f, e.df, e.d2f, f"exp(-{theta:g}y)")


class _ScalarOuter:
    def __init__(self, F: ScalarFunction):
        self.F = F

    def value(self, y):
        return self.F.f(np.asarray(y)[..., 0])

    def grad(self, y):
        return np.asarray(self.F.df(np.asarray(y)[..., 0]))[..., None]

    def hess(self, y):
        return np.asarray(self.F.d2f(np.asarray(y)[..., 0]))[..., None, None]


@dataclass(frozen=True, eq=False)
class CylindricalFunction:
    """``u(lam) = outer(<f_1, lam>, ..., <f_p, lam>)``.

    ``outer``, ``outer_grad`` and ``outer_hess`` act on arrays whose last
    axis has length ``p`` and return shapes ``(...)``, ``(..., p)`` and
    ``(..., p, p)``.
    """

    outer: Callable
    outer_grad: Callable
    outer_hess: Callable
    inner: tuple[TestFunction, ...]
    name: str = "u"

    def __post_init__(self):
        object.__setattr__(self, "inner", tuple(self.inner))

    @property
    def p(self) -> int:
        return len(self.inner)

    @classmethod
    def from_scalar(cls, F: ScalarFunction, phi: TestFunction) -> CylindricalFunction:
        """``F(<phi, .>)``."""
        w = _ScalarOuter(F)
        return cls(
            outer=w.value,
            outer_grad=w.grad,
            outer_hess=w.hess,
            inner=(phi,),
            name=f"{F.name}(<{phi.name},.>)",
        )

    @classmethod
    def linear(cls, phi: TestFunction) -> CylindricalFunction:
        return cls.from_scalar(identity(), phi)

    def pairings(self, lam: AtomicMeasure) -> np.ndarray:
        return np.array([pair(f, lam) for f in self.inner], dtype=float)

    def __call__(self, lam: AtomicMeasure) -> float:
        return float(self.outer(self.pairings(lam)))

    def inner_values(self, x) -> np.ndarray:
        """``f(x)`` stacked as ``(N, p)``."""
        x = np.atleast_2d(np.asarray(x, float))
        return np.stack([f.eval(x) for f in self.inner], axis=-1)

    def check_outer_derivatives(self, y, rtol: float = 1e-4, h: float = 1e-5) -> bool:
        """Finite-difference audit of ``outer_grad`` / ``outer_hess`` at ``y``."""
        y = np.asarray(y, float)
        g = np.asarray(self.outer_grad(y))
        H = np.asarray(self.outer_hess(y))
        g_fd = np.empty(self.p)
        H_fd = np.empty((self.p, self.p))
        for j in range(self.p):
            e = np.zeros(self.p)
            e[j] = h
            g_fd[j] = (self.outer(y + e) - self.outer(y - e)) / (2 * h)
            H_fd[:, j] = (np.asarray(self.outer_grad(y + e)) - np.asarray(self.outer_grad(y - e))) / (2 * h)
        scale = max(1.0, float(np.max(np.abs(g))), float(np.max(np.abs(H))))
        return bool(np.all(np.abs(g - g_fd) <= rtol * scale) and np.all(np.abs(H - H_fd) <= rtol * scale))


def flat_derivative(u: CylindricalFunction, lam: AtomicMeasure, x) -> np.ndarray | float:
    """Linear functional derivative ``delta u(lam, x) = DF(y) . f(x)``."""
    y = u.pairings(lam)
    fx = u.inner_values(x)
    out = fx @ np.asarray(u.outer_grad(y), float)
    return float(out[0]) if out.shape[0] == 1 else out


def second_flat_derivative(u: CylindricalFunction, lam: AtomicMeasure, x, y) -> float:
    """``f(y)^T D^2F f(x)``, symmetric in ``(x, y)``."""
    H = np.asarray(u.outer_hess(u.pairings(lam)), float)
    fx = u.inner_values(x)[0]
    fy = u.inner_values(y)[0]
    return float(fy @ H @ fx)


def intrinsic_derivative(u: CylindricalFunction, lam: AtomicMeasure, x) -> np.ndarray:
    """``D_lam u(lam, x) = sum_j dF_j Df_j(x)`` as a vector in R^d."""
    dF = np.asarray(u.outer_grad(u.pairings(lam)), float)
    x = np.atleast_2d(np.asarray(x, float))
    grads = np.stack([f.grad(x)[0] for f in u.inner], axis=0)  # (p, d)
    return dF @ grads


def intrinsic_jacobian(u: CylindricalFunction, lam: AtomicMeasure, x) -> np.ndarray:
    """``d_x D_lam u(lam, x) = sum_j dF_j D^2 f_j(x)``, a ``(d, d)`` matrix."""
    dF = np.asarray(u.outer_grad(u.pairings(lam)), float)
    x = np.atleast_2d(np.asarray(x, float))
    hess = np.stack([f.hess(x)[0] for f in u.inner], axis=0)  # (p, d, d)
    return np.tensordot(dF, hess, axes=1)


def _coeffs_at(x, lam, a, coeffs: Coefficients):
    x = np.asarray(x, float).reshape(1, -1)
    a = np.asarray(a, float).reshape(1, -1)
    feats = features(lam, coeffs).reshape(1, -1)
    b, s, g = coeffs.evaluate(x, feats, a)
    return x, b, s, g


def apply_bold_L(u: CylindricalFunction, x, lam: AtomicMeasure, a, coeffs: Coefficients) -> float:
    """``b . D_lam u + 1/2 Tr(sigma sigma^T d_x D_lam u) + 1/2 gamma delta^2 u(lam, x, x)``."""
    x2, b, s, g = _coeffs_at(x, lam, a, coeffs)
    Du = intrinsic_derivative(u, lam, x2)
    J = intrinsic_jacobian(u, lam, x2)
    sst = s[0] @ s[0].T
    d2 = second_flat_derivative(u, lam, x2, x2)
    return float(b[0] @ Du + 0.5 * np.trace(sst @ J) + 0.5 * g[0] * d2)


def apply_script_L(F: ScalarFunction, phi: TestFunction, x, lam: AtomicMeasure, a, coeffs: Coefficients) -> float:
    """Superprocess generator ``F'(y) L phi + 1/2 F''(y) gamma phi(x)^2``."""
    x2, b, s, g = _coeffs_at(x, lam, a, coeffs)
    y = pair(phi, lam)
    Lphi = _L_values(phi, x2, b, s)[0]
    return float(F.df(y) * Lphi + 0.5 * F.d2f(y) * g[0] * phi.eval(x2)[0] ** 2)


def apply_L_n(F: ScalarFunction, phi: TestFunction, x, lam: AtomicMeasure, a, n: int, coeffs: Coefficients) -> float:
    """Generator of the n-rescaled branching diffusion on ``F(<phi, .>)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    x2, b, s, g = _coeffs_at(x, lam, a, coeffs)
    y = pair(phi, lam)
    return float(
        L_n_density(F, phi, x2, np.array([y]), b, s, g, n)[0]
    )


def L_n_density(F: ScalarFunction, phi: TestFunction, x, y, b, s, g, n: int) -> np.ndarray:
    """Vectorised ``L^n F_phi`` at particles ``x`` with per-particle pairing ``y``."""
    Lphi = _L_values(phi, x, b, s)
    px = phi.eval(x)
    grad_sigma = np.einsum("ni,nij->nj", phi.grad(x), s)
    diffusive = F.df(y) * Lphi + (0.5 / n) * F.d2f(y) * np.sum(grad_sigma**2, axis=1)
    jump = g * n**2 * (0.5 * F.f(y - px / n) + 0.5 * F.f(y + px / n) - F.f(y))
    return diffusive + jump


def script_L_density(F: ScalarFunction, phi: TestFunction, x, y, b, s, g) -> np.ndarray:
    """Vectorised ``L F_phi`` (superprocess limit) at particles ``x``."""
    return F.df(y) * _L_values(phi, x, b, s) + 0.5 * F.d2f(y) * g * phi.eval(x) ** 2


def quadratic_variation_density(F: ScalarFunction, phi: TestFunction, x, y, s, g, n: int | None) -> np.ndarray:
    """Integrand of the quadratic-variation formula of the martingale problem.

    ``F'(y)^2 (|D phi sigma|^2 / n + gamma phi^2)``; ``n=None`` gives the
    superprocess version without the ``1/n`` term.
    """
    grad_sigma = np.einsum("ni,nij->nj", phi.grad(x), s)
    motion = 0.0 if n is None else np.sum(grad_sigma**2, axis=1) / n
    return F.df(y) ** 2 * (motion + g * phi.eval(x) ** 2)


def jump_quadratic_variation_density(F: ScalarFunction, phi: TestFunction, x, y, s, g, n: int) -> np.ndarray:
    """Exact predictable quadratic variation density of ``F(<phi, mu>)`` at level n.

    Diffusive part ``F'(y)^2 |D phi sigma|^2 / n`` plus the compensated squared
    jumps ``gamma n^2 [ (F(y - phi/n) - F(y))^2 + (F(y + phi/n) - F(y))^2 ] / 2``.
    Coincides with :func:`quadratic_variation_density` when ``F`` is affine.
    """
    grad_sigma = np.einsum("ni,nij->nj", phi.grad(x), s)
    px = phi.eval(x)
    Fy = F.f(y)
    jumps = 0.5 * (F.f(y - px / n) - Fy) ** 2 + 0.5 * (F.f(y + px / n) - Fy) ** 2
    return F.df(y) ** 2 * np.sum(grad_sigma**2, axis=1) / n + g * n**2 * jumps
