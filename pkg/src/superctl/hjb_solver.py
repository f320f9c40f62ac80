"""Monotone finite-difference solver for the exponential-cost HJB equation in one space dimension.

For measure-free coefficients the value of the exponential-cost problem is
``v(t, lam) = exp(-<w(t, .), lam>)`` where ``w`` solves

    -d_t w - max_a { b_a w' + 1/2 sigma_a^2 w'' - 1/2 gamma_a w^2 } = 0,   w(T) = h.

The solver marches backwards from ``h`` with an upwind first derivative, a
centred second derivative and a semi-implicit reaction term,

    w^k = (W + dt (b W'_up + 1/2 sigma^2 W'')) / (1 + dt gamma W / 2),   W = w^{k+1},

evaluated at the maximising control.  For spatially constant data this is the
exact flow of the Riccati equation ``w' = gamma w^2 / 2``, and under the
stability condition the update is monotone, so ``0 <= w <= max h``.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .measure_space import AtomicMeasure, TestFunction
from .model import Coefficients, ControlSet, FeedbackPolicy

logger = logging.getLogger(__name__)

CFL_LIMIT = 0.5


class StabilityError(ValueError):
    """Time step too large for the explicit scheme."""


class SchemeFailure(RuntimeError):
    """The computed surface left the admissible range."""


class OutOfDomainError(ValueError):
    """An atom lies outside the spatial grid."""


@dataclass(frozen=True)
class GridSpec:
    """Uniform grid on ``[x_min, x_max] x [t0, T]`` with ``nx`` nodes and ``nt`` time points.

    When ``sigma2_max`` / ``b_max`` are given the stability condition
    ``dt (sigma^2 / dx^2 + |b| / dx) <= 0.5`` is checked at construction;
    :func:`solve_w` always re-checks it against the actual coefficients.
    """

    x_min: float
    x_max: float
    nx: int
    nt: int
    t0: float = 0.0
    T: float = 1.0
    boundary: str = "reflecting"
    sigma2_max: float | None = None
    b_max: float | None = None

    def __post_init__(self):
        if self.nx < 3:
            raise ValueError("nx must be >= 3")
        if self.nt < 1:
            raise ValueError("nt must be >= 1")
        if not self.x_max > self.x_min:
            raise ValueError("empty spatial interval")
        if self.T < self.t0 or (self.nt > 1 and self.T == self.t0):
            raise ValueError("invalid time interval")
        if self.boundary not in ("reflecting", "clamped"):
            raise ValueError(f"unknown boundary {self.boundary!r}")
        if self.sigma2_max is not None or self.b_max is not None:
            self.check_stability(self.sigma2_max or 0.0, self.b_max or 0.0)

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / (self.nx - 1)

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / (self.nt - 1) if self.nt > 1 else 0.0

    @property
    def xs(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.nx)

    @property
    def ts(self) -> np.ndarray:
        if self.nt == 1:
            return np.array([self.T])
        return np.linspace(self.t0, self.T, self.nt)

    def cfl(self, sigma2_max: float, b_max: float) -> float:
        return self.dt * (sigma2_max / self.dx**2 + b_max / self.dx)

    def check_stability(self, sigma2_max: float, b_max: float):
        c = self.cfl(sigma2_max, b_max)
        if c > CFL_LIMIT * (1 + 1e-12):
            raise StabilityError(
                f"explicit scheme unstable: dt*(sigma^2/dx^2 + |b|/dx) = {c:.4g} > {CFL_LIMIT}; "
                f"need nt >= {stable_nt(self.t0, self.T, self.dx, sigma2_max, b_max)}"
            )

    def describe(self) -> dict:
        return {
            "x_min": self.x_min, "x_max": self.x_max, "nx": self.nx, "nt": self.nt,
            "t0": self.t0, "T": self.T, "dx": self.dx, "dt": self.dt, "boundary": self.boundary,
        }


def stable_nt(t0: float, T: float, dx: float, sigma2_max: float, b_max: float, cfl: float = CFL_LIMIT) -> int:
    """Smallest number of time points satisfying the stability condition with margin ``cfl``."""
    rate = sigma2_max / dx**2 + b_max / dx
    if rate == 0 or T == t0:
        return 2 if T > t0 else 1
    return int(math.ceil((T - t0) * rate / cfl - 1e-9)) + 1


# ---------------------------------------------------------------------------
# Coefficient tables
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _Tables:
    b: np.ndarray  # (M, nx)
    s2: np.ndarray  # (M, nx)
    g: np.ndarray  # (M, nx)


def _tables(coeffs: Coefficients, controls: ControlSet, xs: np.ndarray) -> _Tables:
    if coeffs.dim_x != 1:
        raise ValueError("the HJB solver is one-dimensional")
    if not coeffs.measure_free:
        raise ValueError("the HJB solver requires measure-free coefficients")
    x = xs.reshape(-1, 1)
    feats = np.empty((x.shape[0], 0))
    bs, s2s, gs = [], [], []
    for a in controls.points:
        aa = np.broadcast_to(a, (x.shape[0], controls.dim))
        b, s, g = coeffs.evaluate(x, feats, aa)
        bs.append(np.asarray(b, float)[:, 0])
        s2s.append(np.sum(np.asarray(s, float)[:, 0, :] ** 2, axis=1))
        gs.append(np.asarray(g, float).reshape(-1))
    tab = _Tables(np.array(bs), np.array(s2s), np.array(gs))
    if np.any(tab.g < 0):
        raise ValueError("gamma must be nonnegative")
    return tab


def _pad(W: np.ndarray, boundary: str) -> np.ndarray:
    if boundary == "reflecting":
        return np.concatenate([W[1:2], W, W[-2:-1]])
    return np.concatenate([W[:1], W, W[-1:]])


def _spatial(W: np.ndarray, tab: _Tables, dx: float, boundary: str):
    """Per-control ``b W'_up + 1/2 sigma^2 W''`` on all nodes, shape ``(M, nx)``."""
    P = _pad(W, boundary)
    fwd = (P[2:] - P[1:-1]) / dx
    bwd = (P[1:-1] - P[:-2]) / dx
    d2 = (P[2:] - 2.0 * P[1:-1] + P[:-2]) / dx**2
    drift = np.where(tab.b > 0, tab.b * fwd, tab.b * bwd)
    return drift + 0.5 * tab.s2 * d2


# ---------------------------------------------------------------------------
# Value surface
# ---------------------------------------------------------------------------


@dataclass
class ValueSurface:
    """``w`` on the grid, the maximising control index per node and the terminal data.

    ``policy[k]`` is the control used on ``[t_k, t_{k+1})``; the last row
    holds the maximiser at the terminal data.
    """

    w: np.ndarray
    policy: np.ndarray
    grid: GridSpec
    terminal: TestFunction
    controls: ControlSet
    meta: dict = field(default_factory=dict)

    @property
    def xs(self) -> np.ndarray:
        return self.grid.xs

    @property
    def ts(self) -> np.ndarray:
        return self.grid.ts

    def time_index(self, t: float, warn: bool = True) -> int:
        ts = self.ts
        k = int(np.argmin(np.abs(ts - t)))
        tol = 1e-9 * max(1.0, abs(self.grid.T))
        if warn and abs(ts[k] - t) > tol:
            warnings.warn(f"time {t} is not a grid node; using t={ts[k]}", stacklevel=3)
        return k

    def w_at(self, t: float, x) -> np.ndarray:
        """Linear interpolation of ``w(t, .)`` at the time node nearest ``t``."""
        k = self.time_index(t)
        x = np.asarray(x, float)
        return np.interp(x, self.xs, self.w[k])

    def action_index(self, t: float, x) -> np.ndarray:
        k = self.time_index(t, warn=False)
        return _nearest_node(self.xs, np.asarray(x, float), self.policy[k])

    def to_csv(self, config_hash: str | None = None) -> str:
        """Long-format ``t, x, w, policy_index`` rows."""
        buf = io.StringIO()
        if config_hash is not None:
            buf.write(f"# superctl config_hash={config_hash}\n")
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["t", "x", "w", "policy_index"])
        xs, ts = self.xs, self.ts
        for k in range(self.w.shape[0]):
            tk = repr(float(ts[k]))
            for i in range(self.w.shape[1]):
                wr.writerow([tk, repr(float(xs[i])), repr(float(self.w[k, i])), int(self.policy[k, i])])
        return buf.getvalue()

    def header(self) -> dict:
        return {
            "grid": self.grid.describe(),
            "controls": self.controls.points.tolist(),
            "terminal": self.terminal.describe(),
            "w_min": float(self.w.min()),
            "w_max": float(self.w.max()),
            **self.meta,
        }

    def to_json(self, extra: dict | None = None) -> str:
        return json.dumps({**self.header(), **(extra or {})}, indent=2, sort_keys=True)


def _nearest_node(xs: np.ndarray, x: np.ndarray, values: np.ndarray) -> np.ndarray:
    dx = xs[1] - xs[0]
    i = np.clip(np.rint((x - xs[0]) / dx).astype(np.int64), 0, xs.shape[0] - 1)
    return values[i]


def _march(tab: _Tables, h: np.ndarray, grid: GridSpec, rho: float = 0.0, q=None):
    """Backward march for ``-w_t - max_a{L_a w - q(t) gamma_a w^2 / 2 + rho w} = 0``."""
    nt, nx = grid.nt, grid.nx
    dx, dt, ts = grid.dx, grid.dt, grid.ts
    w = np.empty((nt, nx))
    pol = np.empty((nt, nx), dtype=np.int64)
    w[-1] = h
    cols = np.arange(nx)

    def choose(W, qk):
        S = _spatial(W, tab, dx, grid.boundary)
        H = S - 0.5 * qk * tab.g * W**2
        a = np.argmax(H, axis=0)
        return a, S[a, cols]

    qT = 1.0 if q is None else q(ts[-1])
    pol[-1], _ = choose(w[-1], qT)
    for k in range(nt - 2, -1, -1):
        W = w[k + 1]
        qk = 1.0 if q is None else q(ts[k + 1])
        a, S = choose(W, qk)
        new = (W + dt * (S + rho * W)) / (1.0 + 0.5 * dt * qk * tab.g[a, cols] * W)
        if grid.boundary == "clamped":
            new[0], new[-1] = new[1], new[-2]
        w[k] = new
        pol[k] = a
    return w, pol


def solve_w(coeffs: Coefficients, h: TestFunction, grid: GridSpec, controls: ControlSet) -> ValueSurface:
    """Solve the exponential-case HJB equation backwards from ``w(T) = h``."""
    xs = grid.xs
    tab = _tables(coeffs, controls, xs)
    grid.check_stability(float(tab.s2.max()), float(np.abs(tab.b).max()))
    hv = np.asarray(h.eval(xs.reshape(-1, 1)), float)
    if np.any(hv < 0):
        raise ValueError("terminal data h must be nonnegative")
    w, pol = _march(tab, hv, grid)
    if w.min() < -1e-10:
        i = np.unravel_index(np.argmin(w), w.shape)
        raise SchemeFailure(f"negative w = {w[i]:.3g} at t={grid.ts[i[0]]:.6g}, x={xs[i[1]]:.6g}")
    return ValueSurface(w, pol, grid, h, controls, meta={"cfl": grid.cfl(float(tab.s2.max()), float(np.abs(tab.b).max()))})


def solve_w_tilde(coeffs: Coefficients, h: TestFunction, grid: GridSpec, controls: ControlSet) -> np.ndarray:
    """Solve for ``w~ = e^{-t} w`` from its own equation and map back to ``w``.

    ``w~`` satisfies ``-w~_t - max_a{L_a w~ - gamma_a e^t w~^2 / 2 + w~} = 0``
    with ``w~(T) = e^{-T} h``.  Returns the reconstructed ``w`` on the grid.
    """
    xs = grid.xs
    tab = _tables(coeffs, controls, xs)
    grid.check_stability(float(tab.s2.max()), float(np.abs(tab.b).max()))
    hv = np.asarray(h.eval(xs.reshape(-1, 1)), float)
    wt, _ = _march(tab, math.exp(-grid.T) * hv, grid, rho=1.0, q=math.exp)
    return np.exp(grid.ts)[:, None] * wt


# ---------------------------------------------------------------------------
# Residual, policy, value
# ---------------------------------------------------------------------------


@dataclass
class ResidualReport:
    max_abs: float
    t: float
    x: float
    layer: int
    node: int

    def to_dict(self) -> dict:
        return {"max_abs_residual": self.max_abs, "t": self.t, "x": self.x, "layer": self.layer, "node": self.node}


def hamiltonian(surface: ValueSurface, coeffs: Coefficients, k: int) -> np.ndarray:
    """Per-control Hamiltonian ``(M, nx)`` at layer ``k`` (the values used for ``policy[k]``)."""
    tab = _tables(coeffs, surface.controls, surface.xs)
    W = surface.w[min(k + 1, surface.w.shape[0] - 1)]
    return _spatial(W, tab, surface.grid.dx, surface.grid.boundary) - 0.5 * tab.g * W**2


def residual_check(surface: ValueSurface, coeffs: Coefficients, controls: ControlSet | None = None) -> ResidualReport:
    """Time-centred PDE residual on interior nodes.

    ``-(w^{k+1} - w^k)/dt - max_a{ L_a (w^k + w^{k+1})/2 - gamma_a w^k w^{k+1} / 2 }``
    """
    controls = controls or surface.controls
    grid = surface.grid
    if grid.nt < 2:
        return ResidualReport(0.0, grid.T, float(surface.xs[0]), 0, 0)
    tab = _tables(coeffs, controls, surface.xs)
    w, dt = surface.w, grid.dt
    worst = (-1.0, 0, 0)
    for k in range(grid.nt - 1):
        lo, hi = w[k], w[k + 1]
        S = _spatial(0.5 * (lo + hi), tab, grid.dx, grid.boundary)
        H = np.max(S - 0.5 * tab.g * lo * hi, axis=0)
        r = np.abs(-(hi - lo) / dt - H)[1:-1]
        i = int(np.argmax(r))
        if r[i] > worst[0]:
            worst = (float(r[i]), k, i + 1)
    res, k, i = worst
    return ResidualReport(res, float(grid.ts[k]), float(surface.xs[i]), k, i)


class _SurfaceRule:
    """Tabulated feedback: nearest time node, linear interpolation in x, nearest control."""

    def __init__(self, surface: ValueSurface):
        self.ts = surface.ts
        self.xs = surface.xs
        pts = surface.controls.points
        self.tables = pts[surface.policy]  # (nt, nx, m)
        self.constant = None
        flat = surface.policy.reshape(-1)
        if np.all(flat == flat[0]):
            self.constant = pts[flat[0]].reshape(1, -1)

    def __call__(self, t, x, feats):
        x = np.asarray(x, float)
        n = x.shape[0]
        if self.constant is not None:
            return np.broadcast_to(self.constant, (n, self.constant.shape[1]))
        k = int(np.argmin(np.abs(self.ts - t)))
        table = self.tables[k]
        return np.stack([np.interp(x[:, 0], self.xs, table[:, j]) for j in range(table.shape[1])], axis=1)


class _ProjectedRule:
    def __init__(self, rule, controls):
        self.rule, self.controls = rule, controls

    def __call__(self, t, x, feats):
        a = self.rule(t, x, feats)
        if self.rule.constant is not None:
            return a
        return self.controls.project(a)


def extract_policy(surface: ValueSurface) -> FeedbackPolicy:
    """Feedback policy tabulated from the maximising controls of ``surface``."""
    rule = _SurfaceRule(surface)
    return FeedbackPolicy("tabulated-surface", _ProjectedRule(rule, surface.controls), surface.controls,
                          label="surface-argmax")


def value_of_measure(surface: ValueSurface, t0: float, lam: AtomicMeasure) -> float:
    """``exp(-<w(t0, .), lam>)`` with ``w`` interpolated linearly in space."""
    k = surface.time_index(t0)
    if lam.is_zero():
        return 1.0
    x = lam.locations[:, 0]
    if lam.dim != 1:
        raise ValueError("value_of_measure is one-dimensional")
    lo, hi = surface.grid.x_min, surface.grid.x_max
    if np.any(x < lo) or np.any(x > hi):
        raise OutOfDomainError(f"atom outside the grid [{lo}, {hi}]")
    vals = np.interp(x, surface.xs, surface.w[k])
    return math.exp(-math.fsum(vals * lam.multiplicities) / lam.level)


def pairing_with_w(surface: ValueSurface, k: int, x: np.ndarray, rep: np.ndarray, n_rep: int, level: int):
    """Per-replicate ``<w(t_k, .), mu>`` from flat particle arrays, with out-of-grid flags."""
    xv = x[:, 0]
    inside = (xv >= surface.grid.x_min) & (xv <= surface.grid.x_max)
    vals = np.interp(xv, surface.xs, surface.w[k])
    out = np.bincount(rep, weights=vals, minlength=n_rep) / level
    outside = np.bincount(rep[~inside], minlength=n_rep) > 0
    return out, outside
