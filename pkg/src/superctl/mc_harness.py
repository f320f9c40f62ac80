"""Monte Carlo evaluation of costs and statistical verification checks.

Every check returns a :class:`Report` whose clauses carry the numbers they
compare, together with provenance (config hash, seed, family fingerprint and
censoring counts).  Means are aggregated with ``math.fsum`` so reductions do
not depend on the order in which replicate blocks finish.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .calculus import CylindricalFunction, exp_neg
from .hjb_solver import ValueSurface, extract_policy, pairing_with_w, value_of_measure
from .measure_space import AtomicMeasure, SeparatingFamily, TestFunction, discretize, distance
from .model import Coefficients, CostSpec, FeedbackPolicy
from .particle_sim import (
    Cylindrical,
    DistanceToZero,
    Pairing,
    Probe,
    SimConfig,
    simulate_batch,
)

DEFAULT_Z = 3.0


class EvaluationError(RuntimeError):
    """No usable replicate (all censored)."""


# ---------------------------------------------------------------------------
# Estimates and reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Estimate:
    mean: float
    std_error: float
    replicates: int
    censored: int = 0
    z: float = DEFAULT_Z

    @classmethod
    def from_samples(cls, values, censored: int = 0, z: float = DEFAULT_Z) -> Estimate:
        v = np.asarray(values, float)
        R = v.shape[0]
        if R == 0:
            raise EvaluationError("no uncensored replicates")
        mean = math.fsum(v) / R
        if R > 1:
            var = math.fsum((v - mean) ** 2) / (R - 1)
            se = math.sqrt(var / R)
        else:
            se = 0.0
        return cls(mean, se, R, censored, z)

    @property
    def interval(self) -> tuple[float, float]:
        return self.mean - self.z * self.std_error, self.mean + self.z * self.std_error

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def __str__(self) -> str:
        return f"{self.mean:.6g} ± {self.std_error:.2g} (R={self.replicates}, censored={self.censored})"


@dataclass
class Clause:
    name: str
    passed: bool
    value: float
    bound: float
    detail: str = ""

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class Report:
    kind: str
    clauses: list[Clause]
    numbers: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.clauses)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "passed": self.passed,
            "clauses": [c.to_dict() for c in self.clauses],
            "numbers": _jsonable(self.numbers),
            "provenance": _jsonable(self.provenance),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [f"{self.kind}: {'PASS' if self.passed else 'FAIL'}"]
        width = max([len(c.name) for c in self.clauses] + [4])
        for c in self.clauses:
            mark = "PASS" if c.passed else "FAIL"
            lines.append(f"  [{mark}] {c.name:<{width}}  value={c.value:.6g}  bound={c.bound:.6g}  {c.detail}".rstrip())
        for k, v in self.numbers.items():
            lines.append(f"  {k:<{width + 7}} {_short(v)}")
        for k, v in self.provenance.items():
            lines.append(f"  {k:<{width + 7}} {_short(v)}")
        return "\n".join(lines) + "\n"


def _short(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    if isinstance(v, Estimate):
        return str(v)
    return str(_jsonable(v))


def _jsonable(obj):
    if isinstance(obj, Estimate):
        return obj.to_dict()
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else str(f)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def config_hash(obj) -> str:
    """Stable hash of a JSON-serialisable description."""
    blob = json.dumps(_jsonable(obj), sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def provenance(simconfig: SimConfig, coeffs: Coefficients | None = None, family: SeparatingFamily | None = None,
               censored: int = 0, extra: dict | None = None) -> dict:
    desc = {"sim": simconfig.describe(), "coeffs": coeffs.describe() if coeffs else None, **(extra or {})}
    return {
        "config_hash": (extra or {}).get("config_hash") or config_hash(desc),
        "seed": simconfig.seed,
        "family_fingerprint": family.fingerprint() if family is not None else None,
        "censored": int(censored),
    }


# ---------------------------------------------------------------------------
# Costs
# ---------------------------------------------------------------------------


def exponential_cost(h: TestFunction) -> CostSpec:
    """``psi = 0`` and ``Psi(lam) = exp(-<h, lam>)``."""
    return CostSpec(terminal=CylindricalFunction.from_scalar(exp_neg(1.0), h), running=None, growth_constant=1.0)


def evaluate_cost(t: float, lambda0: AtomicMeasure, policy: FeedbackPolicy, costspec: CostSpec,
                  simconfig: SimConfig, coeffs: Coefficients, workers: int = 1, z: float = DEFAULT_Z) -> Estimate:
    """Monte Carlo estimate of ``J = E[int psi dmu ds + Psi(mu_T)]`` under ``policy``."""
    cfg = simconfig.with_(t0=float(t), record=(Cylindrical(costspec.terminal, name="terminal"),), record_steps=False)
    res = simulate_batch(None, lambda0, policy, cfg, coeffs, running_cost=costspec.running, workers=workers)
    total = res.terminal("terminal") + np.nan_to_num(res.running_cost, nan=0.0)
    keep = ~res.censored
    if not keep.any():
        raise EvaluationError("all replicates hit the mass cap")
    return Estimate.from_samples(total[keep], censored=int((~keep).sum()), z=z)


# ---------------------------------------------------------------------------
# Verification theorem
# ---------------------------------------------------------------------------


def verify_optimality(surface: ValueSurface, t: float, lambda0: AtomicMeasure,
                      alternatives: Sequence[FeedbackPolicy], simconfig: SimConfig, coeffs: Coefficients,
                      h: TestFunction, bias: float = 0.0, z: float = DEFAULT_Z, workers: int = 1) -> Report:
    """Check ``J(a_hat) = v*`` and ``J(alt) >= v*`` for every alternative, statistically.

    Each policy is simulated on its own random stream so the estimates are
    independent.
    """
    if not coeffs.measure_free:
        raise ValueError("verification requires measure-free coefficients")
    cost = exponential_cost(h)
    v_star = value_of_measure(surface, t, lambda0)
    a_hat = extract_policy(surface)
    J_hat = evaluate_cost(t, lambda0, a_hat, cost, simconfig, coeffs, workers, z)
    gap = abs(J_hat.mean - v_star)
    clauses = [Clause("J(a_hat) = v*", gap <= z * J_hat.std_error + bias, gap, z * J_hat.std_error + bias,
                      f"J={J_hat.mean:.6g} v*={v_star:.6g}")]
    alts = {}
    censored = J_hat.censored
    for i, pol in enumerate(alternatives, start=1):
        J = evaluate_cost(t, lambda0, pol, cost, simconfig.with_(stream=simconfig.stream + i), coeffs, workers, z)
        censored += J.censored
        alts[pol.label] = J
        bound = v_star - z * J.std_error
        clauses.append(Clause(f"J({pol.label}) >= v*", J.mean >= bound, J.mean, bound))
    return Report(
        "verify_optimality",
        clauses,
        numbers={"v_star": v_star, "J_hat": J_hat, "alternatives": alts, "bias_allowance": bias},
        provenance=provenance(simconfig, coeffs, censored=censored),
    )


# ---------------------------------------------------------------------------
# Dynamic programming
# ---------------------------------------------------------------------------


class SurfaceValue(Probe):
    """``exp(-<w(t_k, .), mu>)`` per replicate; NaN where a particle left the grid."""

    def __init__(self, surface: ValueSurface, k: int):
        self.surface, self.k = surface, k
        self.name = f"v_surface[t={surface.ts[k]:.6g}]"

    def __call__(self, view):
        s, outside = pairing_with_w(self.surface, self.k, view.x, view.rep, view.n_rep, view.level)
        out = np.exp(-s)
        out[outside] = np.nan
        return out


def dpp_check(surface: ValueSurface, t: float, lambda0: AtomicMeasure, tau: float, simconfig: SimConfig,
              coeffs: Coefficients, h: TestFunction | None = None, bias: float = 0.0, z: float = DEFAULT_Z,
              workers: int = 1) -> Report:
    """Compare ``E[v(tau, mu_tau)]`` under the surface policy with ``v(t, lambda0)``."""
    if not t <= tau <= surface.grid.T:
        raise ValueError("tau must lie in [t, T]")
    v_t = value_of_measure(surface, t, lambda0)
    if tau == t:
        est = Estimate(v_t, 0.0, 1, 0, z)
        outside = 0
    else:
        k = surface.time_index(tau)
        cfg = simconfig.with_(t0=float(t), T=float(tau), record=(SurfaceValue(surface, k),), record_steps=False)
        res = simulate_batch(None, lambda0, extract_policy(surface), cfg, coeffs, workers=workers)
        vals = res.values[:, -1, 0]
        bad = np.isnan(vals)
        outside = int((bad & ~res.censored).sum())
        if bad.all():
            raise EvaluationError("no replicate usable at tau")
        est = Estimate.from_samples(vals[~bad], censored=int(bad.sum()), z=z)
    gap = abs(est.mean - v_t)
    clause = Clause("E v(tau, mu_tau) = v(t, lambda0)", gap <= z * est.std_error + bias, gap,
                    z * est.std_error + bias, f"E={est.mean:.6g} v={v_t:.6g}")
    return Report(
        "dpp_check",
        [clause],
        numbers={"tau": tau, "v_t": v_t, "E_v_tau": est, "left_grid": outside, "bias_allowance": bias},
        provenance=provenance(simconfig, coeffs, censored=est.censored),
    )


# ---------------------------------------------------------------------------
# Moment bounds
# ---------------------------------------------------------------------------


def _with_mass(lam: AtomicMeasure, mass: float, level: int) -> AtomicMeasure:
    scaled = lam.scale(mass / lam.exact_mass)
    if level % scaled.level:
        raise ValueError(f"mass {mass} is not representable at level {level}")
    return scaled.relevel(level)


def moment_bound_check(t: float, lambda0: AtomicMeasure, policies: Sequence[FeedbackPolicy],
                       family: SeparatingFamily, simconfig: SimConfig, coeffs: Coefficients, p: float = 1.0,
                       masses: Sequence[float] = (0.5, 1.0, 2.0, 4.0), max_spread: float = 3.0,
                       workers: int = 1) -> Report:
    """``E[sup_r d(mu_r, 0)^p] / d(lambda, 0)^p`` over a ladder of initial masses.

    ``lambda0`` fixes the spatial shape; it is rescaled to each mass.  Passes
    iff every ratio is finite and ``max / min <= max_spread`` for each policy.
    """
    if not 1.0 <= p <= 2.0:
        raise ValueError("p must lie in [1, 2]")
    probe = DistanceToZero(family, p)
    clauses = []
    table = {}
    censored = 0
    for j, pol in enumerate(policies):
        ratios = []
        for i, m in enumerate(masses):
            lam = _with_mass(lambda0, m, simconfig.level)
            d0 = distance(lam, AtomicMeasure.zero(lam.level, lam.dim), family) ** p
            cfg = simconfig.with_(t0=float(t), record=(probe,), record_steps=True,
                                  stream=simconfig.stream + 100 * j + i)
            res = simulate_batch(None, lam, pol, cfg, coeffs, workers=workers)
            keep = ~res.censored
            censored += res.n_censored
            sup = np.max(res.column(probe.name)[keep], axis=1)
            est = Estimate.from_samples(sup, censored=res.n_censored)
            ratios.append(est.mean / d0)
            table[f"{pol.label}@mass={m:g}"] = {"E_sup": est, "d0": d0, "ratio": est.mean / d0}
        r = np.array(ratios)
        finite = bool(np.all(np.isfinite(r)) and np.all(r > 0))
        spread = float(r.max() / r.min()) if finite else math.inf
        clauses.append(Clause(f"ratio spread [{pol.label}]", finite and spread <= max_spread, spread, max_spread,
                              "ratios=" + ",".join(f"{x:.4g}" for x in r)))
    return Report("moment_bound_check", clauses, numbers={"p": p, "table": table},
                  provenance=provenance(simconfig, coeffs, family, censored))


# ---------------------------------------------------------------------------
# Scaling study
# ---------------------------------------------------------------------------


def variance_with_se(x: np.ndarray) -> tuple[float, float]:
    """Unbiased sample variance and its standard error ``sqrt((m4 - s^4) / R)``."""
    x = np.asarray(x, float)
    R = x.shape[0]
    mean = math.fsum(x) / R
    d = x - mean
    s2 = math.fsum(d**2) / (R - 1)
    m4 = math.fsum(d**4) / R
    return s2, math.sqrt(max(m4 - s2**2, 0.0) / R)


def fit_inverse_level(levels, variances, ses) -> dict:
    """Least-squares fit ``V(n) = v_inf + c / n``; standard errors propagated from ``ses``."""
    n = np.asarray(levels, float)
    V = np.asarray(variances, float)
    X = np.column_stack([np.ones_like(n), 1.0 / n])
    A = np.linalg.solve(X.T @ X, X.T)  # rows map V to (v_inf, c)
    v_inf, c = A @ V
    resid = V - X @ np.array([v_inf, c])
    ss_tot = float(np.sum((V - V.mean()) ** 2))
    r2 = 1.0 - float(resid @ resid) / ss_tot if ss_tot > 0 else 0.0
    se = np.asarray(ses, float)
    return {
        "v_inf": float(v_inf),
        "c": float(c),
        "se_v_inf": float(math.sqrt(np.sum(A[0] ** 2 * se**2))),
        "se_c": float(math.sqrt(np.sum(A[1] ** 2 * se**2))),
        "r2": r2,
    }


def convergence_study(t: float, lambda0_spec, policy: FeedbackPolicy, phi: TestFunction, levels: Sequence[int],
                      simconfig: SimConfig, coeffs: Coefficients, workers: int = 1) -> Report:
    """Estimate ``Var <phi, mu_T>`` per level and fit ``v_inf + c / n``.

    Reports the fit; the clause checks ``c > 0`` and ``R^2 >= 0.9`` (callers
    testing a vanishing correction use ``numbers['fit']`` directly).
    """
    levels = [int(n) for n in levels]
    if len(levels) < 3:
        raise ValueError("convergence study needs at least 3 levels")
    if levels != sorted(levels):
        raise ValueError("levels must be sorted ascending")
    probe = Pairing(phi, name="pair")
    variances, ses, rows, censored = [], [], [], 0
    for i, n in enumerate(levels):
        lam = discretize(lambda0_spec, n)
        cfg = simconfig.with_(level=n, t0=float(t), record=(probe,), record_steps=False,
                              stream=simconfig.stream + i)
        res = simulate_batch(None, lam, policy, cfg, coeffs, workers=workers)
        keep = ~res.censored
        censored += res.n_censored
        v, se = variance_with_se(res.terminal("pair")[keep])
        variances.append(v)
        ses.append(se)
        rows.append({"level": n, "variance": v, "se": se, "replicates": int(keep.sum()), "censored": res.n_censored})
    fit = fit_inverse_level(levels, variances, ses)
    clauses = [
        Clause("c > 0", fit["c"] > 0, fit["c"], 0.0, f"se_c={fit['se_c']:.3g}"),
        Clause("R^2 >= 0.9", fit["r2"] >= 0.9, fit["r2"], 0.9),
    ]
    return Report("convergence_study", clauses, numbers={"levels": rows, "fit": fit},
                  provenance=provenance(simconfig, coeffs, censored=censored))
