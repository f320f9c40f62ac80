"""Finite atomic measures, C^2_b test functions, pairings and the weak* metric.

An :class:`AtomicMeasure` at level ``n`` is ``sum_i (m_i / n) delta_{x_i}`` with
integer multiplicities ``m_i >= 1``.  Test functions carry closed-form
gradients and Hessians together with the constant
``q = max(1, ||D phi||, ||D^2 phi||)`` used to weight the metric.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Sequence

import numpy as np


class InvalidMeasureError(ValueError):
    """Raised for negative weights, non-finite locations or bad levels."""


class InvalidFunctionError(ValueError):
    """Raised when a test function returns non-finite values."""


def _as_points(x, dim: int | None = None) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        # a single point when dim matches, otherwise a batch of 1-D points
        if dim is not None and arr.shape[0] == dim and dim > 1:
            arr = arr.reshape(1, dim)
        else:
            arr = arr.reshape(-1, 1)
    return arr


# ---------------------------------------------------------------------------
# Atomic measures
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class AtomicMeasure:
    """Immutable finite atomic measure with atoms of mass ``multiplicity / level``.

    Atoms with bitwise-identical coordinates are merged and atoms are stored in
    lexicographic order, so two measures built from permuted atom lists are
    indistinguishable.
    """

    level: int
    locations: np.ndarray
    multiplicities: np.ndarray

    def __post_init__(self):
        level = int(self.level)
        if level < 1:
            raise InvalidMeasureError(f"level must be >= 1, got {self.level}")
        loc = np.array(self.locations, dtype=float, copy=True)
        if loc.ndim == 1:
            loc = loc.reshape(-1, 1)
        if loc.ndim != 2:
            raise InvalidMeasureError("locations must be an array of shape (k, d)")
        mult = np.array(self.multiplicities, copy=True).reshape(-1)
        if mult.shape[0] != loc.shape[0]:
            raise InvalidMeasureError("locations and multiplicities differ in length")
        if mult.size and not np.all(np.equal(np.mod(mult, 1), 0)):
            raise InvalidMeasureError("multiplicities must be integers")
        mult = mult.astype(np.int64)
        if np.any(mult < 0):
            raise InvalidMeasureError("negative multiplicity")
        if not np.all(np.isfinite(loc)):
            raise InvalidMeasureError("atom locations must be finite")
        keep = mult > 0
        loc, mult = loc[keep], mult[keep]
        if loc.shape[0] > 1:
            # bitwise merge of identical coordinates, lexicographic order
            uniq, inverse = np.unique(loc, axis=0, return_inverse=True)
            mult = np.bincount(inverse.reshape(-1), weights=mult, minlength=uniq.shape[0])
            loc, mult = uniq, mult.astype(np.int64)
        loc.flags.writeable = False
        mult.flags.writeable = False
        object.__setattr__(self, "level", level)
        object.__setattr__(self, "locations", loc)
        object.__setattr__(self, "multiplicities", mult)

    # constructors -------------------------------------------------------
    @classmethod
    def zero(cls, level: int = 1, dim: int = 1) -> AtomicMeasure:
        return cls(level, np.empty((0, dim)), np.empty(0, dtype=np.int64))

    @classmethod
    def dirac(cls, x, multiplicity: int = 1, level: int = 1) -> AtomicMeasure:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return cls(level, x.reshape(1, -1), [multiplicity])

    @classmethod
    def from_particles(cls, positions, level: int) -> AtomicMeasure:
        """One unit of mass ``1/level`` per row of ``positions``."""
        pos = np.asarray(positions, dtype=float)
        if pos.ndim == 1:
            pos = pos.reshape(-1, 1)
        return cls(level, pos, np.ones(pos.shape[0], dtype=np.int64))

    # basic accessors ----------------------------------------------------
    @property
    def dim(self) -> int:
        return self.locations.shape[1]

    @property
    def weights(self) -> np.ndarray:
        return self.multiplicities / self.level

    @property
    def mass(self) -> float:
        return int(self.multiplicities.sum()) / self.level

    @property
    def exact_mass(self) -> Fraction:
        return Fraction(int(self.multiplicities.sum()), self.level)

    @property
    def n_units(self) -> int:
        return int(self.multiplicities.sum())

    def is_zero(self) -> bool:
        return self.locations.shape[0] == 0

    def particles(self) -> np.ndarray:
        """Unit positions, one row per multiplicity unit."""
        return np.repeat(self.locations, self.multiplicities, axis=0)

    # arithmetic ---------------------------------------------------------
    def relevel(self, new_level: int) -> AtomicMeasure:
        """Same measure expressed at a level that is a multiple of ``self.level``."""
        if new_level % self.level:
            raise InvalidMeasureError(f"level {new_level} is not a multiple of {self.level}")
        k = new_level // self.level
        return AtomicMeasure(new_level, self.locations, self.multiplicities * k)

    def scale(self, c) -> AtomicMeasure:
        """``c * self`` for rational ``c >= 0``, raising the level as needed."""
        c = Fraction(c).limit_denominator(10**9)
        if c < 0:
            raise InvalidMeasureError("negative scaling")
        return AtomicMeasure(
            self.level * c.denominator, self.locations, self.multiplicities * c.numerator
        )

    def __add__(self, other: AtomicMeasure) -> AtomicMeasure:
        if not isinstance(other, AtomicMeasure):
            return NotImplemented
        if other.dim != self.dim and not (self.is_zero() or other.is_zero()):
            raise InvalidMeasureError("dimension mismatch")
        level = math.lcm(self.level, other.level)
        a, b = self.relevel(level), other.relevel(level)
        dim = max(self.dim, other.dim)
        loc = np.concatenate([a.locations.reshape(-1, dim), b.locations.reshape(-1, dim)])
        return AtomicMeasure(level, loc, np.concatenate([a.multiplicities, b.multiplicities]))

    def add_atom(self, x, mass) -> AtomicMeasure:
        """``self + mass * delta_x`` with rational ``mass`` (exact level extension)."""
        mass = Fraction(mass).limit_denominator(10**12)
        x = np.asarray(x, dtype=float).reshape(1, -1)
        return self + AtomicMeasure(mass.denominator, x, [mass.numerator])

    def __eq__(self, other) -> bool:
        if not isinstance(other, AtomicMeasure):
            return NotImplemented
        if self.is_zero() and other.is_zero():
            return True
        level = math.lcm(self.level, other.level)
        a, b = self.relevel(level), other.relevel(level)
        return (
            a.locations.shape == b.locations.shape
            and np.array_equal(a.locations, b.locations)
            and np.array_equal(a.multiplicities, b.multiplicities)
        )

    def __hash__(self):
        return hash((self.exact_mass, self.locations.tobytes()))

    def __repr__(self) -> str:
        return f"AtomicMeasure(level={self.level}, atoms={self.locations.shape[0]}, mass={self.mass:g})"

    # serialisation ------------------------------------------------------
    def to_csv_rows(self) -> list[list]:
        """Rows ``[level, x_1, ..., x_d, multiplicity]``."""
        return [
            [self.level, *[repr(float(v)) for v in loc], int(m)]
            for loc, m in zip(self.locations, self.multiplicities)
        ]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["level", *[f"x{j}" for j in range(self.dim)], "multiplicity"])
        writer.writerows(self.to_csv_rows())
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> AtomicMeasure:
        rows = [r for r in csv.reader(io.StringIO(text)) if r and not r[0].startswith("#")]
        header, body = rows[0], rows[1:]
        dim = len(header) - 2
        if not body:
            return cls.zero(1, dim)
        levels = {int(r[0]) for r in body}
        if len(levels) != 1:
            raise InvalidMeasureError("mixed levels in measure CSV")
        loc = np.array([[float(v) for v in r[1:-1]] for r in body])
        mult = np.array([int(r[-1]) for r in body])
        return cls(levels.pop(), loc, mult)


# ---------------------------------------------------------------------------
# Test functions
# ---------------------------------------------------------------------------


def _grid_in_box(box: np.ndarray, points_per_axis: int) -> np.ndarray:
    axes = [np.linspace(lo, hi, points_per_axis) for lo, hi in box]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=1)


def grid_sup_norms(
    grad: Callable, hess: Callable, box, points_per_axis: int | None = None
) -> tuple[float, float]:
    """Grid maximisation of ``|D phi|`` and the spectral norm of ``D^2 phi``."""
    box = np.asarray(box, dtype=float).reshape(-1, 2)
    d = box.shape[0]
    if points_per_axis is None:
        points_per_axis = {1: 20001, 2: 401, 3: 61}.get(d, 15)
    pts = _grid_in_box(box, points_per_axis)
    g = np.asarray(grad(pts)).reshape(pts.shape[0], d)
    h = np.asarray(hess(pts)).reshape(pts.shape[0], d, d)
    gnorm = float(np.max(np.linalg.norm(g, axis=1)))
    hnorm = float(np.max(np.abs(np.linalg.eigvalsh(0.5 * (h + np.swapaxes(h, 1, 2))))))
    return gnorm, hnorm


@dataclass(frozen=True, eq=False)
class TestFunction:
    """A C^2_b function on R^d with vectorised value, gradient and Hessian.

    ``eval``, ``grad`` and ``hess`` take an ``(N, d)`` array and return arrays
    of shape ``(N,)``, ``(N, d)`` and ``(N, d, d)``.
    """

    __test__ = False  # not a pytest class

    eval: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]
    hess: Callable[[np.ndarray], np.ndarray]
    dim: int
    sup_norm: float
    q: float
    name: str = "phi"
    params: dict = field(default_factory=dict)

    def __call__(self, x) -> np.ndarray:
        return self.eval(_as_points(x, self.dim))

    def describe(self) -> dict:
        return {"name": self.name, "dim": self.dim, **self.params}

    def check_derivatives(self, points, rtol: float = 1e-4, h: float = 1e-4) -> bool:
        """Compare grad/hess against centred finite differences of ``eval``."""
        pts = _as_points(points, self.dim)
        d = self.dim
        g = self.grad(pts).reshape(-1, d)
        H = self.hess(pts).reshape(-1, d, d)
        g_fd = np.empty_like(g)
        H_fd = np.empty_like(H)
        for j in range(d):
            e = np.zeros(d)
            e[j] = h
            g_fd[:, j] = (self.eval(pts + e) - self.eval(pts - e)) / (2 * h)
            H_fd[:, :, j] = (self.grad(pts + e) - self.grad(pts - e)).reshape(-1, d) / (2 * h)
        scale_g = max(1.0, float(np.max(np.abs(g))))
        scale_h = max(1.0, float(np.max(np.abs(H))))
        return bool(
            np.all(np.abs(g - g_fd) <= rtol * scale_g) and np.all(np.abs(H - H_fd) <= rtol * scale_h)
        )


class _Constant:
    def __init__(self, value, dim):
        self.value, self.dim = float(value), int(dim)

    def eval(self, x):
        return np.full(np.shape(x)[0], self.value)

    def grad(self, x):
        return np.zeros((np.shape(x)[0], self.dim))

    def hess(self, x):
        return np.zeros((np.shape(x)[0], self.dim, self.dim))


def constant_function(value: float = 1.0, dim: int = 1) -> TestFunction:
    c = _Constant(value, dim)
    return TestFunction(
        eval=c.eval,
        grad=c.grad,
        hess=c.hess,
        dim=dim,
        sup_norm=abs(c.value),
        q=1.0,
        name="constant",
        params={"value": c.value},
    )


class _Gaussian:
    # picklable so that batches can be shipped to worker processes
    def __init__(self, center, scale, amplitude):
        self.c = np.asarray(center, dtype=float).reshape(1, -1)
        self.s2 = float(scale) ** 2
        self.amp = float(amplitude)

    def value(self, x):
        r = x - self.c
        return self.amp * np.exp(-np.sum(r * r, axis=1) / self.s2)

    def grad(self, x):
        r = x - self.c
        return (-2.0 / self.s2) * r * self.value(x)[:, None]

    def hess(self, x):
        r = x - self.c
        d = x.shape[1]
        v = self.value(x)[:, None, None]
        outer = np.einsum("ni,nj->nij", r, r)
        return v * (4.0 / self.s2**2 * outer - 2.0 / self.s2 * np.eye(d)[None])


def gaussian_function(center, scale: float = 1.0, amplitude: float = 1.0, box=None) -> TestFunction:
    """``amplitude * exp(-|x - center|^2 / scale^2)``; ``q`` by grid maximisation."""
    center = np.atleast_1d(np.asarray(center, dtype=float))
    d = center.shape[0]
    g = _Gaussian(center, scale, amplitude)
    if box is None:
        box = [(c - 6 * scale, c + 6 * scale) for c in center]
    gn, hn = grid_sup_norms(g.grad, g.hess, box)
    return TestFunction(
        eval=g.value,
        grad=g.grad,
        hess=g.hess,
        dim=d,
        sup_norm=abs(float(amplitude)),
        q=max(1.0, gn, hn),
        name="gaussian",
        params={"center": center.tolist(), "scale": float(scale), "amplitude": float(amplitude)},
    )


class _ClampedIdentity:
    def __init__(self, radius, width, component):
        self.R, self.w, self.j = float(radius), float(width), int(component)

    def _parts(self, x):
        z = x[:, self.j]
        s = np.abs(z) - self.R
        u = np.clip(s / self.w, 0.0, 1.0)
        return z, np.sign(z), s, u

    def value(self, x):
        z, sg, s, u = self._parts(x)
        out = np.where(s <= 0, z, sg * (self.R + self.w * (u - u**3 + 0.5 * u**4)))
        return out

    def grad(self, x):
        z, sg, s, u = self._parts(x)
        gj = np.where(s <= 0, 1.0, 1.0 - 3 * u**2 + 2 * u**3)
        out = np.zeros_like(x)
        out[:, self.j] = gj
        return out

    def hess(self, x):
        z, sg, s, u = self._parts(x)
        hj = np.where(s <= 0, 0.0, sg * (-6 * u + 6 * u**2) / self.w)
        out = np.zeros((x.shape[0], x.shape[1], x.shape[1]))
        out[:, self.j, self.j] = hj
        return out


def clamped_identity(radius: float, width: float = 1.0, dim: int = 1, component: int = 0) -> TestFunction:
    """``x_j`` on ``|x_j| <= radius`` with a C^2 flattening over ``width`` outside.

    Not normalised to sup-norm 1; useful for first-moment style checks.
    """
    f = _ClampedIdentity(radius, width, component)
    return TestFunction(
        eval=f.value,
        grad=f.grad,
        hess=f.hess,
        dim=dim,
        sup_norm=radius + 0.5 * width,
        q=max(1.0, 1.0, 1.5 / width),
        name="clamped_identity",
        params={"radius": radius, "width": width, "component": component},
    )


def function_from_callables(
    value: Callable, grad: Callable, hess: Callable, dim: int, box, name: str = "custom"
) -> TestFunction:
    """Wrap user callables, computing sup-norm and ``q`` on a grid over ``box``."""
    box = np.asarray(box, dtype=float).reshape(-1, 2)
    gn, hn = grid_sup_norms(grad, hess, box)
    pts = _grid_in_box(box, {1: 20001, 2: 401}.get(dim, 15))
    sup = float(np.max(np.abs(value(pts))))
    return TestFunction(value, grad, hess, dim, sup, max(1.0, gn, hn), name, {"box": box.tolist()})


# ---------------------------------------------------------------------------
# Pairing and distance
# ---------------------------------------------------------------------------


def pair(phi, lam: AtomicMeasure) -> float:
    """``<phi, lam> = sum_i (m_i / n) phi(x_i)``."""
    if lam.is_zero():
        return 0.0
    fn = phi.eval if isinstance(phi, TestFunction) else phi
    vals = np.asarray(fn(lam.locations), dtype=float).reshape(-1)
    if not np.all(np.isfinite(vals)):
        raise InvalidFunctionError("test function is not finite at an atom")
    return math.fsum(vals * lam.multiplicities) / lam.level


@dataclass(frozen=True, eq=False)
class SeparatingFamily:
    """Ordered family ``phi_0 = 1, phi_1, ...`` truncated at ``K`` members."""

    members: tuple[TestFunction, ...]
    truncation: int | None = None

    def __post_init__(self):
        members = tuple(self.members)
        if not members:
            raise ValueError("empty separating family")
        first = members[0]
        if first.name != "constant" or first.params.get("value") != 1.0:
            raise ValueError("member 0 of a separating family must be the constant 1")
        for k, m in enumerate(members):
            if m.sup_norm > 1.0 + 1e-12:
                raise ValueError(f"member {k} has sup-norm {m.sup_norm} > 1")
        K = len(members) if self.truncation is None else int(self.truncation)
        if not 1 <= K <= len(members):
            raise ValueError(f"truncation {K} outside [1, {len(members)}]")
        object.__setattr__(self, "members", members)
        object.__setattr__(self, "truncation", K)

    @property
    def dim(self) -> int:
        return self.members[0].dim

    @property
    def active(self) -> tuple[TestFunction, ...]:
        return self.members[: self.truncation]

    @property
    def weights(self) -> np.ndarray:
        return np.array([2.0**-k / m.q for k, m in enumerate(self.active)])

    def pairings(self, lam: AtomicMeasure) -> np.ndarray:
        return np.array([pair(m, lam) for m in self.active])

    def fingerprint(self) -> str:
        desc = json.dumps(
            {"K": self.truncation, "members": [m.describe() for m in self.active],
             "q": [round(m.q, 12) for m in self.active]},
            sort_keys=True,
        )
        return hashlib.sha256(desc.encode()).hexdigest()[:16]


def default_family(dim: int = 1, truncation: int = 8, box=None) -> SeparatingFamily:
    """Constant 1 plus seven Gaussians on a small grid of centres and scales."""
    centers = [0.0, -1.0, 1.0, 0.0, -2.0, 2.0, 0.0]
    scales = [1.0, 1.0, 1.0, 0.5, 1.0, 1.0, 3.0]
    if box is None:
        box = [(-10.0, 10.0)] * dim
    members = [constant_function(1.0, dim)]
    for c, s in zip(centers, scales):
        members.append(gaussian_function(np.full(dim, c), s, 1.0, box=box))
    return SeparatingFamily(tuple(members), truncation)


def family_from_config(centers: Sequence[float], scales: Sequence[float], truncation: int,
                       box: Sequence[float], dim: int = 1) -> SeparatingFamily:
    if len(centers) != len(scales):
        raise ValueError("family centers and scales differ in length")
    box_d = [tuple(box)] * dim
    members = [constant_function(1.0, dim)]
    members += [gaussian_function(np.full(dim, c), s, 1.0, box=box_d) for c, s in zip(centers, scales)]
    return SeparatingFamily(tuple(members), truncation)


def distance(lam: AtomicMeasure, lam2: AtomicMeasure, family: SeparatingFamily) -> float:
    """Truncated weak* distance ``sum_{k<K} 2^-k q_k^-1 |<phi_k, lam> - <phi_k, lam2>|``."""
    if not family.members:
        raise ValueError("empty family")
    for m in (lam, lam2):
        if not m.is_zero() and m.dim != family.dim:
            raise ValueError(f"measure dimension {m.dim} does not match family dimension {family.dim}")
    diff = np.abs(family.pairings(lam) - family.pairings(lam2))
    return math.fsum(family.weights * diff)


# ---------------------------------------------------------------------------
# Discretisation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AtomListSpec:
    """Explicit atoms with real (not necessarily rational) weights."""

    locations: np.ndarray
    weights: np.ndarray


@dataclass(frozen=True)
class DensitySpec:
    """Product density given by per-coordinate sampled marginals.

    ``grids[j]`` and ``densities[j]`` sample the j-th marginal.  In one
    dimension ``mass`` defaults to the integral of the sampled density; for
    ``d > 1`` the marginals are normalised and ``mass`` must be given.
    """

    grids: tuple
    densities: tuple
    mass: float | None = None


def _largest_remainder(weights: np.ndarray, n: int) -> np.ndarray:
    total_units = math.floor(n * math.fsum(weights) + 1e-9)
    raw = n * weights
    base = np.floor(raw + 1e-12).astype(np.int64)
    short = total_units - int(base.sum())
    if short > 0:
        order = np.argsort(-(raw - base), kind="stable")
        base[order[:short]] += 1
    elif short < 0:
        order = np.argsort(raw - base, kind="stable")
        for i in order:
            if short == 0:
                break
            if base[i] > 0:
                base[i] -= 1
                short += 1
    return base


def _quantiles(grid, dens, count: int) -> np.ndarray:
    grid = np.asarray(grid, dtype=float)
    dens = np.asarray(dens, dtype=float)
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(grid))])
    cdf /= cdf[-1]
    levels = (np.arange(count) + 0.5) / count
    # inverse CDF; flat stretches of the CDF are resolved to their left end
    keep = np.concatenate([[True], np.diff(cdf) > 0])
    return np.interp(levels, cdf[keep], grid[keep])


def discretize(spec, n: int) -> AtomicMeasure:
    """Atomic approximation at level ``n`` with total mass ``floor(n * mass) / n``.

    Atom lists keep their locations and round weights by largest remainders;
    densities place ``floor(n * mass)`` unit atoms at mid-quantiles of each
    marginal (tensor grid of quantiles when ``d > 1``).
    """
    if n < 1:
        raise InvalidMeasureError("level must be >= 1")
    if isinstance(spec, AtomicMeasure):
        spec = AtomListSpec(spec.locations, spec.weights)
    if isinstance(spec, AtomListSpec):
        loc = np.asarray(spec.locations, dtype=float)
        if loc.ndim == 1:
            loc = loc.reshape(-1, 1)
        w = np.asarray(spec.weights, dtype=float).reshape(-1)
        if np.any(w < 0):
            raise InvalidMeasureError("negative weight in measure description")
        return AtomicMeasure(n, loc, _largest_remainder(w, n))
    if isinstance(spec, DensitySpec):
        d = len(spec.grids)
        for dens in spec.densities:
            if np.any(np.asarray(dens) < 0):
                raise InvalidMeasureError("negative density")
        if spec.mass is None:
            if d != 1:
                raise InvalidMeasureError("mass required for multivariate densities")
            g, f = np.asarray(spec.grids[0], float), np.asarray(spec.densities[0], float)
            mass = float(np.sum(0.5 * (f[1:] + f[:-1]) * np.diff(g)))
        else:
            mass = float(spec.mass)
        if mass < 0:
            raise InvalidMeasureError("negative mass")
        units = math.floor(n * mass + 1e-9)
        if units == 0:
            return AtomicMeasure.zero(n, d)
        if d == 1:
            xs = _quantiles(spec.grids[0], spec.densities[0], units)
            return AtomicMeasure.from_particles(xs.reshape(-1, 1), n)
        per_axis = max(1, int(math.floor(units ** (1.0 / d) + 1e-9)))
        axes = [_quantiles(g, f, per_axis) for g, f in zip(spec.grids, spec.densities)]
        cells = _grid_from_axes(axes)
        mult = np.full(cells.shape[0], units // cells.shape[0], dtype=np.int64)
        extra = units - int(mult.sum())
        if extra:
            # spread the leftover units evenly over the tensor grid
            idx = np.floor(np.arange(extra) * cells.shape[0] / extra).astype(np.int64)
            np.add.at(mult, idx, 1)
        return AtomicMeasure(n, cells, mult)
    raise TypeError(f"cannot discretise {type(spec).__name__}")


def _grid_from_axes(axes: Iterable[np.ndarray]) -> np.ndarray:
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=1)
