"""Forward simulation of controlled n-rescaled branching diffusions.

Every unit of mass ``1/n`` is a particle.  Over a step of length ``dt`` a
particle

1. reads its action from the policy at its pre-step location,
2. moves by one Euler-Maruyama step,
3. with probability ``1 - exp(-n gamma dt)`` dies or splits in two at its
   post-move location (each with probability 1/2).

Measure features are frozen at their pre-step values.  Replicates are
simulated together in fixed-size blocks; each block owns a Philox stream
derived from ``(seed, stream, block index)``, so results do not depend on how
blocks are scheduled across workers.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .calculus import (
    CylindricalFunction,
    L_n_density,
    ScalarFunction,
    jump_quadratic_variation_density,
    quadratic_variation_density,
    script_L_density,
)
from .measure_space import AtomicMeasure, SeparatingFamily, TestFunction
from .model import Coefficients, Constant, FeedbackPolicy

logger = logging.getLogger(__name__)

BRANCHING_GUARD = 0.1


class SimulationError(RuntimeError):
    """Non-finite coefficients during a step; carries the offending state."""

    def __init__(self, message: str, time: float, state: AtomicMeasure | None = None, replicate: int | None = None):
        super().__init__(message)
        self.time = time
        self.state = state
        self.replicate = replicate


@dataclass(frozen=True)
class SimConfig:
    """Level, time grid, seeding and recording options for a batch of replicates.

    ``mass_cap`` is an absolute bound on total mass; ``None`` means 1000 times
    the initial mass.  ``stream`` separates experiments that share a seed.
    """

    level: int
    dt: float
    T: float
    t0: float = 0.0
    seed: int = 0
    replicates: int = 1
    mass_cap: float | None = None
    record: tuple = ()
    record_steps: bool = False
    block_size: int = 1000
    stream: int = 0

    def __post_init__(self):
        if self.level < 1:
            raise ValueError("level must be >= 1")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.T < self.t0:
            raise ValueError("horizon end precedes start")
        if self.replicates < 1 or self.block_size < 1:
            raise ValueError("replicates and block_size must be >= 1")
        steps = (self.T - self.t0) / self.dt
        if abs(steps - round(steps)) > 1e-6 * max(1.0, steps):
            raise ValueError(f"horizon length {self.T - self.t0} is not a multiple of dt={self.dt}")
        object.__setattr__(self, "record", tuple(_as_probe(p) for p in self.record))

    @property
    def n_steps(self) -> int:
        return int(round((self.T - self.t0) / self.dt))

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    def with_(self, **changes) -> SimConfig:
        return dataclasses.replace(self, **changes)

    def check_guard(self, coeffs: Coefficients):
        g = coeffs.bounds.get("gamma", math.inf)
        if math.isfinite(g) and self.level * g * self.dt > BRANCHING_GUARD + 1e-12:
            raise ValueError(
                f"n * gamma_max * dt = {self.level * g * self.dt:.4g} exceeds {BRANCHING_GUARD}; reduce dt"
            )

    def describe(self) -> dict:
        d = dataclasses.asdict(self)
        d["record"] = [p.describe() for p in self.record]
        return d


# ---------------------------------------------------------------------------
# Probes: functionals recorded along trajectories
# ---------------------------------------------------------------------------


class StateView:
    """Read-only view of a block state at one time, with lazily computed extras."""

    def __init__(self, x, rep, n_rep, level, time, coeffs: Coefficients, policy: FeedbackPolicy):
        self.x, self.rep, self.n_rep, self.level, self.time = x, rep, n_rep, level, time
        self.coeffs, self.policy = coeffs, policy
        self._feats = self._actions = self._cv = None
        self._pairs: dict = {}

    def integrate(self, values) -> np.ndarray:
        """Per-replicate ``int g dmu`` for per-particle values ``g``."""
        return np.bincount(self.rep, weights=values, minlength=self.n_rep) / self.level

    def pair(self, phi: TestFunction) -> np.ndarray:
        key = id(phi)
        if key not in self._pairs:
            self._pairs[key] = self.integrate(phi.eval(self.x))
        return self._pairs[key]

    @property
    def feats(self) -> np.ndarray:
        if self._feats is None:
            fs = self.coeffs.feature_functions
            if fs:
                per_rep = np.stack([self.pair(f) for f in fs], axis=1)
                self._feats = per_rep[self.rep]
            else:
                self._feats = np.empty((self.x.shape[0], 0))
        return self._feats

    @property
    def actions(self) -> np.ndarray:
        if self._actions is None:
            self._actions = self.policy.action(self.time, self.x, self.feats)
        return self._actions

    @property
    def coeff_values(self):
        if self._cv is None:
            c = self.coeffs
            a = self.actions
            maps = (c.b, c.sigma, c.gamma)
            b, s, g = (m(self.x, self.feats, a) for m in maps)
            bad = np.zeros(self.x.shape[0], dtype=bool)
            for m, v in zip(maps, (b, s, g)):
                if not (isinstance(m, Constant) and m.is_finite()):
                    bad |= ~np.isfinite(v).reshape(v.shape[0], -1).all(axis=1)
            if bad.any():
                r = int(self.rep[np.argmax(bad)])
                state = AtomicMeasure.from_particles(self.x[self.rep == r], self.level)
                raise SimulationError(
                    f"non-finite coefficient at t={self.time:.6g} in replicate-in-block {r}; state: {state!r}",
                    self.time, state, r,
                )
            self._cv = (b, s, g)
        return self._cv


class Probe:
    name = "probe"

    def __call__(self, view: StateView) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError

    def describe(self) -> dict:
        return {"probe": type(self).__name__, "name": self.name}


class Pairing(Probe):
    def __init__(self, phi: TestFunction, name: str | None = None):
        self.phi = phi
        self.name = name or f"pair[{phi.name}]"

    def __call__(self, view):
        return view.pair(self.phi)

    def describe(self):
        return {**super().describe(), "phi": self.phi.describe()}


class Cylindrical(Probe):
    def __init__(self, u: CylindricalFunction, name: str | None = None):
        self.u = u
        self.name = name or f"cyl[{u.name}]"

    def __call__(self, view):
        y = np.stack([view.pair(f) for f in self.u.inner], axis=-1)
        return np.asarray(self.u.outer(y), float)

    def describe(self):
        return {**super().describe(), "inner": [f.describe() for f in self.u.inner]}


class DistanceToZero(Probe):
    """``d(mu, 0)^p`` for the truncated weak* metric of ``family``."""

    def __init__(self, family: SeparatingFamily, p: float = 1.0, name: str | None = None):
        self.family, self.p = family, float(p)
        self.name = name or f"dist0^{self.p:g}"

    def __call__(self, view):
        total = np.zeros(view.n_rep)
        for w, phi in zip(self.family.weights, self.family.active):
            total += w * np.abs(view.pair(phi))
        return total**self.p

    def describe(self):
        return {**super().describe(), "family": self.family.fingerprint(), "p": self.p}


class GeneratorIntegral(Probe):
    """Per-replicate ``int g(x, mu, a) mu(dx)`` for the martingale-problem densities.

    ``kind`` selects ``g``: ``"Ln"`` (generator at level n), ``"L"``
    (superprocess generator), ``"qv"`` (quadratic-variation formula at level
    ``n``, or its limit when ``n`` is None) and ``"qv_exact"`` (exact
    predictable quadratic variation of the level-n particle system).
    """

    KINDS = ("Ln", "L", "qv", "qv_exact")

    def __init__(self, F: ScalarFunction, phi: TestFunction, n: int | None, kind: str):
        if kind not in self.KINDS:
            raise ValueError(f"unknown generator kind {kind!r}")
        if kind in ("Ln", "qv_exact") and n is None:
            raise ValueError(f"{kind} requires a level n")
        self.F, self.phi, self.n, self.kind = F, phi, n, kind
        self.name = f"{kind}[{F.name},{phi.name},{n}]"

    def __call__(self, view):
        if view.x.shape[0] == 0:
            return np.zeros(view.n_rep)
        b, s, g = view.coeff_values
        y = view.pair(self.phi)[view.rep]
        if self.kind == "Ln":
            dens = L_n_density(self.F, self.phi, view.x, y, b, s, g, self.n)
        elif self.kind == "L":
            dens = script_L_density(self.F, self.phi, view.x, y, b, s, g)
        elif self.kind == "qv":
            dens = quadratic_variation_density(self.F, self.phi, view.x, y, s, g, self.n)
        else:
            dens = jump_quadratic_variation_density(self.F, self.phi, view.x, y, s, g, self.n)
        return view.integrate(dens)

    def describe(self):
        return {**super().describe(), "kind": self.kind, "n": self.n, "phi": self.phi.describe()}


def _as_probe(obj) -> Probe:
    if isinstance(obj, Probe):
        return obj
    if isinstance(obj, TestFunction):
        return Pairing(obj)
    if isinstance(obj, CylindricalFunction):
        return Cylindrical(obj)
    raise TypeError(f"cannot record {type(obj).__name__}")


# ---------------------------------------------------------------------------
# Stepping
# ---------------------------------------------------------------------------


def block_rng(seed: int, stream: int, block: int) -> np.random.Generator:
    """Counter-based generator for one replicate block."""
    ss = np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=(int(stream), int(block)))
    return np.random.Generator(np.random.Philox(ss))


def _remove_rows(x, rep, rows):
    """Delete ``rows`` (sorted, unique) by moving surviving tail rows into the holes."""
    m = rows.shape[0]
    keep_n = x.shape[0] - m
    holes = rows[rows < keep_n]
    tail = np.arange(keep_n, x.shape[0])
    src = tail[~np.isin(tail, rows, assume_unique=True)]
    x[holes] = x[src]
    rep[holes] = rep[src]
    return x[:keep_n], rep[:keep_n]


def _advance(view: StateView, dt: float, rng: np.random.Generator):
    """One step of motion plus branching; returns ``(x, rep, births, deaths)``.

    Events are sparse (probability at most ~0.1 per particle), so offspring
    first overwrite the slots of particles that died; only the surplus is
    appended or swap-removed.  Particle order is therefore not preserved,
    which is immaterial because replicates are exchangeable in their atoms.
    """
    x, rep, level = view.x, view.rep, view.level
    n_rep = view.n_rep
    if x.shape[0] == 0:
        zeros = np.zeros(n_rep, dtype=np.int64)
        return x, rep, zeros, zeros
    b, s, g = view.coeff_values
    x = x + b * dt
    if np.any(s):
        xi = rng.standard_normal((x.shape[0], s.shape[2]))
        if s.shape[1:] == (1, 1):
            x += math.sqrt(dt) * s[:, 0, :] * xi
        else:
            x += math.sqrt(dt) * np.einsum("nij,nj->ni", s, xi)
    g_min, g_max = float(g.min()), float(g.max())
    if level * dt * g_max > BRANCHING_GUARD * (1 + 1e-9):
        raise ValueError(f"n * gamma * dt = {level * dt * g_max:.4g} exceeds {BRANCHING_GUARD} at t={view.time:.6g}")
    if g_min == g_max:
        p_event = -math.expm1(-level * dt * g_max)
    else:
        p_event = -np.expm1(-(level * dt) * g)
    u = rng.random(x.shape[0])
    ev = np.flatnonzero(u < p_event)
    if ev.shape[0] == 0:
        zeros = np.zeros(n_rep, dtype=np.int64)
        return x, rep, zeros, zeros
    p_ev = p_event if np.ndim(p_event) == 0 else p_event[ev]
    is_death = u[ev] < 0.5 * p_ev
    dead, split = ev[is_death], ev[~is_death]
    births = np.bincount(rep[split], minlength=n_rep)
    deaths = np.bincount(rep[dead], minlength=n_rep)
    k = min(dead.shape[0], split.shape[0])
    x[dead[:k]] = x[split[:k]]
    rep[dead[:k]] = rep[split[:k]]
    if split.shape[0] > k:
        extra = split[k:]
        x = np.concatenate([x, x[extra]])
        rep = np.concatenate([rep, rep[extra]])
    elif dead.shape[0] > k:
        x, rep = _remove_rows(x, rep, dead[k:])
    return x, rep, births, deaths


def step(state: AtomicMeasure, time: float, policy: FeedbackPolicy, config: SimConfig,
         coeffs: Coefficients, rng: np.random.Generator) -> AtomicMeasure:
    """Advance a single measure by one step of ``config.dt``."""
    if state.level != config.level:
        raise ValueError(f"state level {state.level} != config level {config.level}")
    x = state.particles().astype(float)
    rep = np.zeros(x.shape[0], dtype=np.int64)
    view = StateView(x, rep, 1, config.level, time, coeffs, policy)
    x, rep, _, _ = _advance(view, config.dt, rng)
    if x.shape[0] == 0:
        return AtomicMeasure.zero(config.level, state.dim)
    return AtomicMeasure.from_particles(x, config.level)


# ---------------------------------------------------------------------------
# Batches
# ---------------------------------------------------------------------------


@dataclass
class TrajectoryRecord:
    times: np.ndarray
    names: tuple
    functional_values: np.ndarray  # (times, functionals)
    event_log: np.ndarray  # (steps, 2) births/deaths per step, or (1, 2) totals
    final_measure: AtomicMeasure
    extinct_at: float | None
    censored: bool = False
    running_cost: float = 0.0


@dataclass
class BatchResult:
    """Replicate-indexed outputs of :func:`simulate_batch`."""

    config: SimConfig
    times: np.ndarray
    names: tuple
    values: np.ndarray  # (R, times, functionals)
    births: np.ndarray  # (R,) totals or (R, steps)
    deaths: np.ndarray
    extinct_at: np.ndarray  # NaN where the population survives
    censored: np.ndarray
    running_cost: np.ndarray
    final_x: np.ndarray
    final_rep: np.ndarray
    dim: int = 1
    meta: dict = field(default_factory=dict)

    @property
    def replicates(self) -> int:
        return self.values.shape[0]

    @property
    def n_censored(self) -> int:
        return int(self.censored.sum())

    def column(self, name: str) -> np.ndarray:
        try:
            j = self.names.index(name)
        except ValueError:
            raise KeyError(f"functional {name!r} was not recorded; have {self.names}") from None
        return self.values[:, :, j]

    def terminal(self, name: str) -> np.ndarray:
        return self.column(name)[:, -1]

    def final_measure(self, r: int) -> AtomicMeasure:
        pts = self.final_x[self.final_rep == r]
        if pts.shape[0] == 0:
            return AtomicMeasure.zero(self.config.level, self.dim)
        return AtomicMeasure.from_particles(pts, self.config.level)

    def final_masses(self) -> np.ndarray:
        return np.bincount(self.final_rep, minlength=self.replicates) / self.config.level

    def record(self, r: int) -> TrajectoryRecord:
        if self.births.ndim == 2:
            log = np.stack([self.births[r], self.deaths[r]], axis=1)
        else:
            log = np.array([[self.births[r], self.deaths[r]]])
        ext = self.extinct_at[r]
        return TrajectoryRecord(
            times=self.times,
            names=self.names,
            functional_values=self.values[r],
            event_log=log,
            final_measure=self.final_measure(r),
            extinct_at=None if np.isnan(ext) else float(ext),
            censored=bool(self.censored[r]),
            running_cost=float(self.running_cost[r]),
        )

    def records(self) -> list[TrajectoryRecord]:
        return [self.record(r) for r in range(self.replicates)]

    def summary_rows(self) -> tuple[list[str], list[list]]:
        """Per-replicate summary: terminal functionals, extinction time, event counts."""
        header = ["replicate", *[f"{n}@T" for n in self.names], "extinct_at", "births", "deaths", "censored"]
        births = self.births if self.births.ndim == 1 else self.births.sum(axis=1)
        deaths = self.deaths if self.deaths.ndim == 1 else self.deaths.sum(axis=1)
        rows = []
        for r in range(self.replicates):
            rows.append([
                r,
                *[_fmt(v) for v in self.values[r, -1, :]],
                _fmt(self.extinct_at[r]),
                int(births[r]),
                int(deaths[r]),
                int(self.censored[r]),
            ])
        return header, rows

    def timeseries_rows(self) -> tuple[list[str], list[list]]:
        header = ["replicate", "time", "functional", "value"]
        rows = []
        for r in range(self.replicates):
            for k, t in enumerate(self.times):
                for j, name in enumerate(self.names):
                    rows.append([r, _fmt(t), name, _fmt(self.values[r, k, j])])
        return header, rows


def _fmt(v) -> str:
    v = float(v)
    if math.isnan(v):
        return "nan"
    return repr(v)


def _run_block(args):
    t0, lambda0, policy, config, coeffs, running_cost, block, n_rep = args
    rng = block_rng(config.seed, config.stream, block)
    level, dt = config.level, config.dt
    probes = config.record
    units = lambda0.particles().astype(float)
    k0 = units.shape[0]
    d = lambda0.dim if k0 else coeffs.dim_x
    x = np.tile(units.reshape(k0, d), (n_rep, 1))
    rep = np.repeat(np.arange(n_rep), k0)
    cap_units = math.inf
    if config.mass_cap is not None:
        cap_units = config.mass_cap * level
    elif k0:
        cap_units = 1000 * k0

    K = config.n_steps
    times = t0 + dt * np.arange(K + 1)
    rec_idx = range(K + 1) if config.record_steps else [K]
    values = np.full((n_rep, len(rec_idx), len(probes)), np.nan)
    if config.record_steps:
        births = np.zeros((n_rep, K), dtype=np.int64)
        deaths = np.zeros((n_rep, K), dtype=np.int64)
    else:
        births = np.zeros(n_rep, dtype=np.int64)
        deaths = np.zeros(n_rep, dtype=np.int64)
    extinct_at = np.full(n_rep, np.nan)
    if k0 == 0:
        extinct_at[:] = t0
    censored = np.zeros(n_rep, dtype=bool)
    cost = np.zeros(n_rep)
    units_now = np.full(n_rep, k0, dtype=np.int64)

    def record(view, slot):
        for j, probe in enumerate(probes):
            vals = np.asarray(probe(view), float)
            values[:, slot, j] = np.where(censored, np.nan, vals)

    for k in range(K):
        view = StateView(x, rep, n_rep, level, times[k], coeffs, policy)
        if config.record_steps:
            record(view, k)
        if running_cost is not None and x.shape[0]:
            cost += dt * view.integrate(np.asarray(running_cost(x, view.feats, view.actions), float))
        x, rep, nb, nd = _advance(view, dt, rng)
        if config.record_steps:
            births[:, k], deaths[:, k] = nb, nd
        else:
            births += nb
            deaths += nd
        units_now += nb - nd
        over = units_now > cap_units
        if over.any():
            censored |= over
            keep = ~censored[rep]
            x, rep = x[keep], rep[keep]
            units_now[censored] = 0
        newly = (units_now == 0) & np.isnan(extinct_at) & ~censored
        extinct_at[newly] = times[k + 1]

    view = StateView(x, rep, n_rep, level, times[K], coeffs, policy)
    record(view, len(rec_idx) - 1)
    cost[censored] = np.nan
    return values, births, deaths, extinct_at, censored, cost, x, rep


def _blocks(config: SimConfig):
    R, B = config.replicates, config.block_size
    return [(i, min(B, R - i * B)) for i in range((R + B - 1) // B)]


def simulate_batch(t: float | None, lambda0: AtomicMeasure, policy: FeedbackPolicy, config: SimConfig,
                   coeffs: Coefficients, running_cost=None, workers: int = 1) -> BatchResult:
    """Simulate ``config.replicates`` independent trajectories from ``lambda0``.

    ``t`` overrides ``config.t0`` when given.  ``running_cost(x, feats, a)``
    is integrated against the measure with a left-endpoint Riemann sum.
    """
    if t is not None and t != config.t0:
        config = config.with_(t0=float(t))
    if lambda0.level != config.level:
        raise ValueError(f"initial measure level {lambda0.level} != simulation level {config.level}")
    if not lambda0.is_zero() and lambda0.dim != coeffs.dim_x:
        raise ValueError("initial measure dimension does not match coefficients")
    config.check_guard(coeffs)
    jobs = [(config.t0, lambda0, policy, config, coeffs, running_cost, b, n) for b, n in _blocks(config)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_run_block, jobs))
    else:
        parts = [_run_block(j) for j in jobs]

    offsets = np.cumsum([0] + [n for _, n in _blocks(config)])
    final_x = np.concatenate([p[6] for p in parts]) if parts else np.empty((0, coeffs.dim_x))
    final_rep = np.concatenate([p[7] + off for p, off in zip(parts, offsets)])
    times = config.times if config.record_steps else config.times[-1:]
    return BatchResult(
        config=config,
        times=times,
        names=tuple(p.name for p in config.record),
        values=np.concatenate([p[0] for p in parts]),
        births=np.concatenate([p[1] for p in parts]),
        deaths=np.concatenate([p[2] for p in parts]),
        extinct_at=np.concatenate([p[3] for p in parts]),
        censored=np.concatenate([p[4] for p in parts]),
        running_cost=np.concatenate([p[5] for p in parts]),
        final_x=final_x,
        final_rep=final_rep,
        dim=coeffs.dim_x,
    )


def simulate(t: float | None, lambda0: AtomicMeasure, policy: FeedbackPolicy, config: SimConfig,
             coeffs: Coefficients, replicate: int = 0) -> TrajectoryRecord:
    """One trajectory, identical to replicate ``replicate`` of :func:`simulate_batch`."""
    if not 0 <= replicate < config.replicates:
        raise IndexError("replicate index out of range")
    if t is not None and t != config.t0:
        config = config.with_(t0=float(t))
    if lambda0.level != config.level:
        raise ValueError(f"initial measure level {lambda0.level} != simulation level {config.level}")
    config.check_guard(coeffs)
    block, offset = divmod(replicate, config.block_size)
    n_rep = dict(_blocks(config))[block]
    out = _run_block((config.t0, lambda0, policy, config, coeffs, None, block, n_rep))
    values, births, deaths, extinct_at, censored, cost, x, rep = out
    pts = x[rep == offset]
    final = AtomicMeasure.from_particles(pts, config.level) if pts.shape[0] else AtomicMeasure.zero(config.level, lambda0.dim)
    if births.ndim == 2:
        log = np.stack([births[offset], deaths[offset]], axis=1)
    else:
        log = np.array([[births[offset], deaths[offset]]])
    ext = extinct_at[offset]
    return TrajectoryRecord(
        times=config.times if config.record_steps else config.times[-1:],
        names=tuple(p.name for p in config.record),
        functional_values=values[offset],
        event_log=log,
        final_measure=final if config.n_steps else lambda0,
        extinct_at=None if np.isnan(ext) else float(ext),
        censored=bool(censored[offset]),
    )


# ---------------------------------------------------------------------------
# Martingale-problem diagnostics
# ---------------------------------------------------------------------------


def martingale_probes(F: ScalarFunction, phi: TestFunction, n: int, limit: bool = False) -> tuple[Probe, ...]:
    """Functionals to record (per step) for :func:`martingale_diagnostic`."""
    comp = GeneratorIntegral(F, phi, None if limit else n, "L" if limit else "Ln")
    return (
        Pairing(phi),
        comp,
        GeneratorIntegral(F, phi, None if limit else n, "qv"),
        GeneratorIntegral(F, phi, n, "qv_exact"),
    )


@dataclass
class MartingaleReport:
    replicates: int
    censored: int
    mean_terminal: float
    se_terminal: float
    z: float
    qv_empirical: float
    qv_formula: float
    qv_ratio: float
    qv_ratio_se: float
    qv_ratio_exact: float
    qv_ratio_exact_se: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _ratio_with_se(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    ma, mb = float(np.mean(a)), float(np.mean(b))
    if mb == 0.0:
        return (1.0 if ma == 0.0 else math.inf), 0.0
    r = ma / mb
    resid = a - r * b
    se = float(np.std(resid, ddof=1) / math.sqrt(a.shape[0]) / abs(mb)) if a.shape[0] > 1 else 0.0
    return r, se


def martingale_diagnostic(records, F: ScalarFunction, phi: TestFunction, n: int,
                          limit: bool = False, min_replicates: int = 100) -> MartingaleReport:
    """Test the martingale property of ``M = F(<phi, mu>) - int compensator``.

    ``records`` is a :class:`BatchResult` (or a sequence of
    :class:`TrajectoryRecord`) recorded per step with the probes of
    :func:`martingale_probes`.  Returns the z-statistic of the mean terminal
    value of ``M`` and the ratio of the realised quadratic variation
    ``sum (Delta M)^2`` to the formula, together with the ratio to the exact
    finite-n jump compensator.
    """
    probes = martingale_probes(F, phi, n, limit)
    names = [p.name for p in probes]
    if isinstance(records, BatchResult):
        times = records.times
        cols = [records.column(nm) for nm in names]
        censored = records.censored
    else:
        records = list(records)
        if not records:
            raise ValueError("no records")
        times = records[0].times
        cols = []
        for nm in names:
            j = records[0].names.index(nm)
            cols.append(np.stack([r.functional_values[:, j] for r in records]))
        censored = np.array([r.censored for r in records])
    if times.shape[0] < 2:
        raise ValueError("martingale diagnostic needs per-step recording")
    keep = ~censored
    y, comp, qv, qv_exact = (c[keep] for c in cols)
    R = y.shape[0]
    if R < min_replicates:
        raise ValueError(f"martingale diagnostic needs at least {min_replicates} replicates, got {R}")
    dt = np.diff(times)
    Fy = F.f(y)
    dM = np.diff(Fy, axis=1) - comp[:, :-1] * dt
    M_T = dM.sum(axis=1)
    mean = float(np.mean(M_T))
    se = float(np.std(M_T, ddof=1) / math.sqrt(R))
    if se == 0.0:
        z = 0.0 if abs(mean) < 1e-12 else math.copysign(math.inf, mean)
    else:
        z = mean / se
    realised = np.sum(dM**2, axis=1)
    formula = np.sum(qv[:, :-1] * dt, axis=1)
    exact = np.sum(qv_exact[:, :-1] * dt, axis=1)
    ratio, ratio_se = _ratio_with_se(realised, formula)
    ratio_x, ratio_x_se = _ratio_with_se(realised, exact)
    return MartingaleReport(
        replicates=R,
        censored=int(censored.sum()),
        mean_terminal=mean,
        se_terminal=se,
        z=z,
        qv_empirical=float(np.mean(realised)),
        qv_formula=float(np.mean(formula)),
        qv_ratio=ratio,
        qv_ratio_se=ratio_se,
        qv_ratio_exact=ratio_x,
        qv_ratio_exact_se=ratio_x_se,
    )
