"""Problem data: coefficients b, sigma, gamma, the action grid, costs and policies.

Coefficients are vectorised over particles: every map receives ``x`` of shape
``(N, d)``, measure features of shape ``(N, F)`` and actions of shape
``(N, m)``.  Measure dependence enters only through the feature vector
``(<f_j, mu>)_j``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .measure_space import (
    AtomicMeasure,
    InvalidFunctionError,
    SeparatingFamily,
    TestFunction,
    distance,
    pair,
)


# ---------------------------------------------------------------------------
# Built-in coefficient maps
# ---------------------------------------------------------------------------


class CoefficientMap:
    """Base class for named, picklable coefficient maps.

    ``shape`` is the per-particle output shape: ``(d,)`` for drifts,
    ``(d, d')`` for volatilities and ``()`` for branching rates.
    """

    kind = "abstract"

    def __init__(self, shape: tuple[int, ...]):
        self.shape = tuple(shape)

    def __call__(self, x, feats, a) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError

    def describe(self) -> dict:
        return {"kind": self.kind, "shape": list(self.shape)}


class Constant(CoefficientMap):
    kind = "constant"

    def __init__(self, value, shape=()):
        value = np.asarray(value, dtype=float)
        shape = tuple(shape) if shape else value.shape
        super().__init__(shape)
        self.value = np.broadcast_to(value, shape).copy()

    def __call__(self, x, feats, a):
        # read-only broadcast view; callers never write into coefficient arrays
        return np.broadcast_to(self.value, (x.shape[0], *self.shape))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.value)))

    def is_zero(self) -> bool:
        return not np.any(self.value)

    def sup(self) -> float:
        return float(np.max(np.abs(self.value))) if self.value.size else 0.0

    def describe(self):
        return {**super().describe(), "value": self.value.tolist()}


class Affine(CoefficientMap):
    """``c0 + Cx x + Ca a + Cf feats``, reshaped to ``shape``.

    ``Cx``, ``Ca`` and ``Cf`` are matrices mapping to ``prod(shape)``
    components; scalars are accepted in the one-dimensional case.
    """

    kind = "affine"

    def __init__(self, shape=(), c0=0.0, cx=0.0, ca=0.0, cf=None, clip=None):
        super().__init__(shape)
        k = int(np.prod(self.shape)) if self.shape else 1
        self.c0 = np.broadcast_to(np.asarray(c0, float), (k,)).copy()
        self.cx = np.atleast_2d(np.asarray(cx, float))
        self.ca = np.atleast_2d(np.asarray(ca, float))
        self.cf = None if cf is None else np.atleast_2d(np.asarray(cf, float))
        self.clip = clip

    def __call__(self, x, feats, a):
        k = self.c0.shape[0]
        out = np.broadcast_to(self.c0, (x.shape[0], k)).copy()
        if np.any(self.cx):
            out += x @ np.broadcast_to(self.cx, (k, x.shape[1])).T
        if np.any(self.ca):
            out += a @ np.broadcast_to(self.ca, (k, a.shape[1])).T
        if self.cf is not None and feats.shape[1]:
            out += feats @ np.broadcast_to(self.cf, (k, feats.shape[1])).T
        if self.clip is not None:
            out = np.clip(out, *self.clip)
        return out.reshape((x.shape[0], *self.shape))

    def describe(self):
        d = {**super().describe(), "c0": self.c0.tolist(), "cx": self.cx.tolist(), "ca": self.ca.tolist()}
        if self.cf is not None:
            d["cf"] = self.cf.tolist()
        if self.clip is not None:
            d["clip"] = list(self.clip)
        return d


class Table(CoefficientMap):
    """Piecewise-linear interpolation in the first coordinate of ``x`` (constant outside)."""

    kind = "table"

    def __init__(self, xs, values, shape=()):
        super().__init__(shape)
        self.xs = np.asarray(xs, float)
        self.values = np.asarray(values, float)
        if self.xs.ndim != 1 or self.values.shape[0] != self.xs.shape[0]:
            raise ValueError("table xs and values must have matching length")
        if np.any(np.diff(self.xs) <= 0):
            raise ValueError("table xs must be strictly increasing")

    def __call__(self, x, feats, a):
        v = np.interp(x[:, 0], self.xs, self.values)
        return np.broadcast_to(v.reshape((-1,) + (1,) * len(self.shape)), (x.shape[0], *self.shape)).copy()

    def describe(self):
        return {**super().describe(), "xs": self.xs.tolist(), "values": self.values.tolist()}


class FromCallable(CoefficientMap):
    """Wrap an arbitrary vectorised callable (not serialisable to config)."""

    kind = "callable"

    def __init__(self, fn: Callable, shape=(), label: str | None = None):
        super().__init__(shape)
        self.fn = fn
        self.label = label or getattr(fn, "__name__", "callable")

    def __call__(self, x, feats, a):
        return np.asarray(self.fn(x, feats, a), float).reshape((x.shape[0], *self.shape))

    def describe(self):
        return {**super().describe(), "label": self.label}


def _as_map(obj, shape) -> CoefficientMap:
    if isinstance(obj, CoefficientMap):
        return obj
    if callable(obj):
        return FromCallable(obj, shape)
    return Constant(obj, shape)


# ---------------------------------------------------------------------------
# Coefficients
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Coefficients:
    """Drift, volatility and branching rate with declared bounds.

    ``bounds`` holds declared sup-norms under the keys ``"b"``, ``"sigma"``
    and ``"gamma"``; missing entries are filled from constant maps or left as
    ``inf``.  ``domain`` is the box used by the sampling audits.
    """

    dim_x: int
    dim_noise: int
    dim_action: int
    b: CoefficientMap
    sigma: CoefficientMap
    gamma: CoefficientMap
    feature_functions: tuple[TestFunction, ...] = ()
    bounds: dict = field(default_factory=dict)
    lipschitz: float | None = None
    domain: tuple = ((-10.0, 10.0),)

    def __post_init__(self):
        d, dp = self.dim_x, self.dim_noise
        object.__setattr__(self, "b", _as_map(self.b, (d,)))
        object.__setattr__(self, "sigma", _as_map(self.sigma, (d, dp)))
        object.__setattr__(self, "gamma", _as_map(self.gamma, ()))
        object.__setattr__(self, "feature_functions", tuple(self.feature_functions))
        bounds = dict(self.bounds)
        for key in ("b", "sigma", "gamma"):
            m = getattr(self, key)
            if key not in bounds:
                bounds[key] = m.sup() if isinstance(m, Constant) else math.inf
        object.__setattr__(self, "bounds", bounds)

    @property
    def n_features(self) -> int:
        return len(self.feature_functions)

    @property
    def measure_free(self) -> bool:
        return self.n_features == 0

    def evaluate(self, x, feats, a):
        """Return ``(b, sigma, gamma)`` at the given particles; raises on NaN."""
        b = self.b(x, feats, a)
        s = self.sigma(x, feats, a)
        g = self.gamma(x, feats, a)
        if not (np.all(np.isfinite(b)) and np.all(np.isfinite(s)) and np.all(np.isfinite(g))):
            raise FloatingPointError("non-finite coefficient value")
        return b, s, g

    def describe(self) -> dict:
        return {
            "dim_x": self.dim_x,
            "dim_noise": self.dim_noise,
            "dim_action": self.dim_action,
            "b": self.b.describe(),
            "sigma": self.sigma.describe(),
            "gamma": self.gamma.describe(),
            "features": [f.describe() for f in self.feature_functions],
            "bounds": {k: (None if math.isinf(v) else v) for k, v in self.bounds.items()},
        }

    # sampling audits ---------------------------------------------------
    def audit(self, controls: ControlSet, rng: np.random.Generator, samples: int = 2000) -> dict:
        """Check gamma >= 0, finiteness, declared bounds and the Lipschitz constant."""
        box = np.asarray(self.domain, float).reshape(-1, 2)
        box = np.broadcast_to(box, (self.dim_x, 2))
        x = rng.uniform(box[:, 0], box[:, 1], size=(samples, self.dim_x))
        a = controls.points[rng.integers(0, len(controls), samples)]
        feats = rng.uniform(0.0, 2.0, size=(samples, self.n_features))
        b, s, g = self.evaluate(x, feats, a)
        report = {
            "gamma_nonnegative": bool(np.all(g >= 0)),
            "b_sup": float(np.max(np.abs(b))) if b.size else 0.0,
            "sigma_sup": float(np.max(np.abs(s))) if s.size else 0.0,
            "gamma_sup": float(np.max(g)) if g.size else 0.0,
        }
        report["bounds_ok"] = bool(
            report["b_sup"] <= self.bounds["b"] + 1e-12
            and report["sigma_sup"] <= self.bounds["sigma"] + 1e-12
            and report["gamma_sup"] <= self.bounds["gamma"] + 1e-12
        )
        if self.lipschitz is not None:
            x2 = x + rng.normal(scale=0.1, size=x.shape)
            f2 = feats + rng.normal(scale=0.1, size=feats.shape)
            b2, s2, _ = self.evaluate(x2, f2, a)
            num = np.linalg.norm(b - b2, axis=1) + np.linalg.norm((s - s2).reshape(samples, -1), axis=1)
            den = np.linalg.norm(x - x2, axis=1) + np.linalg.norm(feats - f2, axis=1)
            est = float(np.max(num / np.maximum(den, 1e-300)))
            report["lipschitz_estimate"] = est
            report["lipschitz_ok"] = est <= self.lipschitz * (1 + 1e-9)
        return report


def features(mu: AtomicMeasure, coeffs: Coefficients) -> np.ndarray:
    """Feature vector ``(<f_j, mu>)_j`` read by measure-dependent coefficients."""
    return np.array([pair(f, mu) for f in coeffs.feature_functions], dtype=float)


def generator_L(phi: TestFunction, x, mu: AtomicMeasure, a, coeffs: Coefficients) -> float:
    """Spatial generator ``b . D phi + 1/2 Tr(sigma sigma^T D^2 phi)`` at one point."""
    x = np.asarray(x, float).reshape(1, -1)
    a = np.asarray(a, float).reshape(1, -1)
    feats = features(mu, coeffs).reshape(1, -1)
    b, s, _ = coeffs.evaluate(x, feats, a)
    return float(_L_values(phi, x, b, s)[0])


def _L_values(phi: TestFunction, x, b, s) -> np.ndarray:
    g = phi.grad(x)
    H = phi.hess(x)
    if not (np.all(np.isfinite(g)) and np.all(np.isfinite(H))):
        raise InvalidFunctionError("non-finite derivative of test function")
    a_mat = np.einsum("nij,nkj->nik", s, s)
    return np.einsum("ni,ni->n", b, g) + 0.5 * np.einsum("nij,nji->n", a_mat, H)


# ---------------------------------------------------------------------------
# Controls, costs, policies
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ControlSet:
    """Finite grid of actions standing in for the compact set A."""

    points: np.ndarray
    box: tuple | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, float)
        if pts.ndim == 1:
            pts = pts.reshape(-1, 1)
        if pts.shape[0] == 0:
            raise ValueError("control set must be nonempty")
        if self.box is not None:
            box = np.asarray(self.box, float).reshape(-1, 2)
            if np.any(pts < box[:, 0]) or np.any(pts > box[:, 1]):
                raise ValueError("control point outside declared box")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def project(self, a) -> np.ndarray:
        """Nearest control point (ties to the lowest index), row-wise."""
        a = np.asarray(a, float).reshape(-1, self.dim)
        d2 = ((a[:, None, :] - self.points[None, :, :]) ** 2).sum(axis=2)
        return self.points[np.argmin(d2, axis=1)]

    def contains(self, a) -> np.ndarray:
        a = np.asarray(a, float).reshape(-1, self.dim)
        return np.any(np.all(a[:, None, :] == self.points[None, :, :], axis=2), axis=1)


@dataclass(frozen=True, eq=False)
class CostSpec:
    """Running cost ``psi`` and terminal cost ``Psi``.

    ``terminal`` is a cylindrical function of the terminal measure (typically
    ``exp(-<h, mu>)``); ``running`` is ``None`` for zero running cost.
    """

    terminal: object  # calculus.CylindricalFunction
    running: Callable | None = None
    growth_constant: float = 1.0

    def audit_growth(self, family: SeparatingFamily, states: Sequence[AtomicMeasure], controls: ControlSet) -> bool:
        """Empirical check of the linear / quadratic growth bounds on sampled states."""
        C = self.growth_constant
        for lam in states:
            dist = distance(lam, AtomicMeasure.zero(lam.level, lam.dim), family)
            if abs(self.terminal(lam)) > C * (1 + dist**2) + 1e-12:
                return False
            if self.running is not None and not lam.is_zero():
                feats = np.broadcast_to(np.zeros(0), (lam.locations.shape[0], 0))
                for a in controls.points:
                    aa = np.broadcast_to(a, (lam.locations.shape[0], controls.dim))
                    vals = np.asarray(self.running(lam.locations, feats, aa))
                    if np.any(np.abs(vals) > C * (1 + dist) + 1e-12):
                        return False
        return True


class FeedbackPolicy:
    """Markovian feedback ``(t, x, features) -> action`` valued in a :class:`ControlSet`.

    ``kind`` is one of ``"constant-action"``, ``"tabulated-surface"`` or
    ``"callable-rule"``.
    """

    def __init__(self, kind: str, rule: Callable, controls: ControlSet, label: str = ""):
        if kind not in ("constant-action", "tabulated-surface", "callable-rule"):
            raise ValueError(f"unknown policy kind {kind!r}")
        self.kind = kind
        self._rule = rule
        self.controls = controls
        self.label = label or kind

    @classmethod
    def constant(cls, action, controls: ControlSet) -> FeedbackPolicy:
        a = np.asarray(action, float).reshape(1, -1)
        if not controls.contains(a)[0]:
            raise ValueError(f"action {action} is not in the control set")
        return cls("constant-action", _ConstantRule(a), controls, label=f"constant{a.ravel().tolist()}")

    @classmethod
    def from_callable(cls, fn: Callable, controls: ControlSet, label: str = "rule") -> FeedbackPolicy:
        return cls("callable-rule", fn, controls, label)

    def action(self, t: float, x, feats) -> np.ndarray:
        x = np.asarray(x, float)
        a = np.asarray(self._rule(t, x, feats), float).reshape(x.shape[0], -1)
        if self.kind == "callable-rule":
            a = self.controls.project(a)
        return a

    def describe(self) -> dict:
        return {"kind": self.kind, "label": self.label}


class _ConstantRule:
    def __init__(self, a):
        self.a = a

    def __call__(self, t, x, feats):
        return np.broadcast_to(self.a, (np.shape(x)[0], self.a.shape[1]))


def measure_free_coefficients(b=0.0, sigma=0.0, gamma=1.0, dim: int = 1, **kw) -> Coefficients:
    """Shorthand for ``d = d' = m = 1`` measure-independent coefficients."""
    return Coefficients(dim, dim, kw.pop("dim_action", 1), b, sigma, gamma, **kw)
