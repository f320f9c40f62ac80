"""Experiment configuration: a sectioned INI file validated against a fixed schema.

Coefficients, terminal functions and test functions are written as a
built-in name followed by ``key=value`` parameters, for example::

    [coefficients]
    drift = affine c0=0 cx=0 ca=1
    sigma = constant value=1
    gamma = table xs=-1;0;1 values=1;2;1

    [cost]
    h = gaussian center=1 scale=1 amplitude=1

Lists use commas (``points = -1, 1``); table entries use semicolons.
Unknown sections or keys are rejected.
"""

from __future__ import annotations

import configparser
import hashlib
import io
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .measure_space import (
    AtomicMeasure,
    SeparatingFamily,
    TestFunction,
    constant_function,
    family_from_config,
    gaussian_function,
)
from .model import Affine, Coefficients, Constant, ControlSet, FeedbackPolicy, Table


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


# section -> key -> default (strings, exactly as they would appear in the file)
SCHEMA: dict[str, dict[str, str]] = {
    "experiment": {
        "seed": "20240601",
        "workers": "1",
        "name": "default",
    },
    "family": {
        "centers": "0, -1, 1, 0, -2, 2, 0",
        "scales": "1, 1, 1, 0.5, 1, 1, 3",
        "truncation": "8",
        "box": "-10, 10",
    },
    "coefficients": {
        "drift": "constant value=0",
        "sigma": "constant value=0",
        "gamma": "constant value=1",
        "gamma_bound": "auto",
        "lipschitz": "none",
    },
    "controls": {
        "points": "0",
    },
    "cost": {
        "h": "constant value=1",
    },
    "initial": {
        "atoms": "0:1",
    },
    "policy": {
        "kind": "surface",
        "action": "0",
    },
    "simulation": {
        "level": "50",
        "dt": "0.001",
        "t0": "0",
        "T": "1",
        "replicates": "10000",
        "block_size": "1000",
        "mass_cap": "auto",
        "timeseries": "false",
        "stream": "0",
    },
    "grid": {
        "x_min": "-10",
        "x_max": "10",
        "nx": "401",
        "nt": "auto",
        "boundary": "reflecting",
        "residual_tol": "0.01",
    },
    "verify": {
        "alternatives": "",
        "tau": "0.5",
        "kappa": "0.14",
        "z": "3",
    },
    "scaling": {
        "levels": "1, 4, 16, 64",
        "phi": "gaussian center=0 scale=1 amplitude=1",
    },
    "moment": {
        "masses": "0.5, 1, 2, 4",
        "p": "1",
    },
}


# keys that cannot change any result and are therefore not hashed
EXECUTION_ONLY = ("workers",)


@dataclass
class ExperimentConfig:
    """Validated configuration with typed accessors and builders."""

    parser: configparser.ConfigParser

    # -- loading ---------------------------------------------------------
    @classmethod
    def load(cls, path: str | Path | None = None, overrides: list[str] | None = None,
             seed: int | None = None) -> ExperimentConfig:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str  # keys are case-sensitive (T vs t0)
        cp.read_dict(SCHEMA)
        if path is not None:
            text = Path(path).read_text()
            user = configparser.ConfigParser(interpolation=None)
            user.optionxform = str
            try:
                user.read_string(text, source=str(path))
            except configparser.Error as exc:
                raise ConfigError(str(exc)) from exc
            _merge(cp, user)
        for item in overrides or []:
            if "=" not in item or "." not in item.split("=", 1)[0]:
                raise ConfigError(f"override must look like section.key=value, got {item!r}")
            lhs, value = item.split("=", 1)
            section, key = lhs.strip().split(".", 1)
            _set(cp, section, key, value.strip())
        if seed is not None:
            cp["experiment"]["seed"] = str(int(seed))
        cfg = cls(cp)
        cfg.validate()
        return cfg

    @classmethod
    def shipped(cls, name: str = "default", **kw) -> ExperimentConfig:
        path = resources.files("superctl") / "configs" / f"{name}.ini"
        with resources.as_file(path) as p:
            return cls.load(p, **kw)

    def validate(self):
        """Build every object once so errors surface before any computation."""
        self.seed, self.workers
        self.coefficients()
        self.controls()
        self.terminal()
        self.initial_measure()
        self.family()
        self.grid_params()
        self.sim_params()
        self.alternatives()
        self.scaling_params()
        self.moment_params()
        if self.get("policy", "kind") not in ("surface", "constant"):
            raise ConfigError("policy.kind must be 'surface' or 'constant'")
        if self.get("grid", "boundary") not in ("reflecting", "clamped"):
            raise ConfigError("grid.boundary must be 'reflecting' or 'clamped'")

    # -- raw access --------------------------------------------------------
    def get(self, section: str, key: str) -> str:
        return self.parser[section][key].strip()

    def _float(self, section, key) -> float:
        try:
            return float(self.get(section, key))
        except ValueError:
            raise ConfigError(f"{section}.{key} must be a number") from None

    def _int(self, section, key) -> int:
        try:
            return int(self.get(section, key))
        except ValueError:
            raise ConfigError(f"{section}.{key} must be an integer") from None

    def _floats(self, section, key) -> list[float]:
        raw = self.get(section, key)
        if not raw:
            return []
        try:
            return [float(v) for v in raw.split(",")]
        except ValueError:
            raise ConfigError(f"{section}.{key} must be a comma-separated list of numbers") from None

    def to_text(self) -> str:
        buf = io.StringIO()
        for section in SCHEMA:
            buf.write(f"[{section}]\n")
            for key in SCHEMA[section]:
                buf.write(f"{key} = {self.get(section, key)}\n")
            buf.write("\n")
        return buf.getvalue()

    @property
    def hash(self) -> str:
        """Hash of the resolved config; execution-only keys (workers) are left out."""
        body = "".join(line for line in self.to_text().splitlines(keepends=True)
                       if not line.startswith(tuple(f"{k} =" for k in EXECUTION_ONLY)))
        return hashlib.sha256(body.encode()).hexdigest()[:16]

    # -- typed views ---------------------------------------------------------
    @property
    def seed(self) -> int:
        s = self._int("experiment", "seed")
        if not 0 <= s < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        return s

    @property
    def workers(self) -> int:
        w = self._int("experiment", "workers")
        if w < 1:
            raise ConfigError("workers must be >= 1")
        return w

    def family(self) -> SeparatingFamily:
        centers = self._floats("family", "centers")
        scales = self._floats("family", "scales")
        box = self._floats("family", "box")
        if len(box) != 2:
            raise ConfigError("family.box must be 'lo, hi'")
        try:
            return family_from_config(centers, scales, self._int("family", "truncation"), box)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def controls(self) -> ControlSet:
        pts = self._floats("controls", "points")
        try:
            return ControlSet(np.array(pts))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def coefficients(self) -> Coefficients:
        b = parse_coefficient(self.get("coefficients", "drift"), (1,))
        s = parse_coefficient(self.get("coefficients", "sigma"), (1, 1))
        g = parse_coefficient(self.get("coefficients", "gamma"), ())
        bounds = {}
        gb = self.get("coefficients", "gamma_bound")
        if gb != "auto":
            bounds["gamma"] = float(gb)
        else:
            bounds["gamma"] = _sup_on_controls(g, self.controls())
        bounds["b"] = _sup_on_controls(b, self.controls())
        bounds["sigma"] = _sup_on_controls(s, self.controls())
        lip = self.get("coefficients", "lipschitz")
        return Coefficients(1, 1, 1, b, s, g, bounds=bounds,
                            lipschitz=None if lip == "none" else float(lip))

    def terminal(self) -> TestFunction:
        return parse_test_function(self.get("cost", "h"), self._floats("family", "box"))

    def initial_measure(self, level: int | None = None) -> AtomicMeasure:
        level = level or self.sim_params()["level"]
        locs, units = [], []
        for item in self.get("initial", "atoms").split(","):
            try:
                x, w = item.split(":")
                x, w = float(x), float(w)
            except ValueError:
                raise ConfigError(f"initial.atoms entries must be 'location:mass', got {item!r}") from None
            k = w * level
            if w < 0 or abs(k - round(k)) > 1e-9:
                raise ConfigError(f"initial mass {w} is not a multiple of 1/{level}")
            locs.append(x)
            units.append(int(round(k)))
        return AtomicMeasure(level, np.array(locs).reshape(-1, 1), units)

    def policy(self, surface=None) -> FeedbackPolicy:
        if self.get("policy", "kind") == "constant":
            return FeedbackPolicy.constant(float(self.get("policy", "action")), self.controls())
        if surface is None:
            raise ConfigError("policy.kind = surface needs a solved surface")
        from .hjb_solver import extract_policy

        return extract_policy(surface)

    def alternatives(self) -> list[FeedbackPolicy]:
        pts = self._floats("verify", "alternatives")
        ctrl = self.controls()
        try:
            return [FeedbackPolicy.constant(a, ctrl) for a in pts]
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def sim_params(self) -> dict:
        level = self._int("simulation", "level")
        dt = self._float("simulation", "dt")
        t0, T = self._float("simulation", "t0"), self._float("simulation", "T")
        reps = self._int("simulation", "replicates")
        cap = self.get("simulation", "mass_cap")
        ts = self.get("simulation", "timeseries").lower()
        if ts not in ("true", "false"):
            raise ConfigError("simulation.timeseries must be true or false")
        if level < 1 or dt <= 0 or reps < 1 or T < t0:
            raise ConfigError("simulation: need level >= 1, dt > 0, replicates >= 1, T >= t0")
        return {
            "level": level, "dt": dt, "t0": t0, "T": T, "replicates": reps,
            "block_size": self._int("simulation", "block_size"),
            "mass_cap": None if cap == "auto" else float(cap),
            "timeseries": ts == "true",
            "stream": self._int("simulation", "stream"),
        }

    def sim_config(self, **changes):
        from .particle_sim import SimConfig

        p = self.sim_params()
        p.pop("timeseries")
        p.update(changes)
        try:
            return SimConfig(seed=self.seed, **p)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def grid_params(self) -> dict:
        nt = self.get("grid", "nt")
        out = {
            "x_min": self._float("grid", "x_min"),
            "x_max": self._float("grid", "x_max"),
            "nx": self._int("grid", "nx"),
            "nt": None if nt == "auto" else int(nt),
            "boundary": self.get("grid", "boundary"),
            "residual_tol": self._float("grid", "residual_tol"),
        }
        if out["nx"] < 3 or out["x_max"] <= out["x_min"]:
            raise ConfigError("grid: need nx >= 3 and x_max > x_min")
        return out

    def grid(self):
        from .hjb_solver import GridSpec, _tables, stable_nt

        gp = self.grid_params()
        sp = self.sim_params()
        nt = gp["nt"]
        if nt is None:
            xs = np.linspace(gp["x_min"], gp["x_max"], gp["nx"])
            tab = _tables(self.coefficients(), self.controls(), xs)
            dx = xs[1] - xs[0]
            nt = stable_nt(sp["t0"], sp["T"], dx, float(tab.s2.max()), float(np.abs(tab.b).max()))
            # align the time grid with the simulation grid where cheap to do so
            steps = int(round((sp["T"] - sp["t0"]) / sp["dt"]))
            if nt - 1 < steps:
                nt = steps + 1
            else:
                nt = steps * int(math.ceil((nt - 1) / steps)) + 1
        return GridSpec(gp["x_min"], gp["x_max"], gp["nx"], nt, sp["t0"], sp["T"], gp["boundary"])

    def scaling_params(self) -> dict:
        levels = [int(v) for v in self._floats("scaling", "levels")]
        return {"levels": levels, "phi": parse_test_function(self.get("scaling", "phi"), self._floats("family", "box"))}

    def moment_params(self) -> dict:
        p = self._float("moment", "p")
        if not 1 <= p <= 2:
            raise ConfigError("moment.p must lie in [1, 2]")
        return {"masses": self._floats("moment", "masses"), "p": p}

    @property
    def kappa(self) -> float:
        return self._float("verify", "kappa")


def _merge(cp: configparser.ConfigParser, user: configparser.ConfigParser):
    for section in user.sections():
        for key, value in user[section].items():
            _set(cp, section, key, value)


def _set(cp, section, key, value):
    if section not in SCHEMA:
        raise ConfigError(f"unknown section [{section}]")
    if key not in SCHEMA[section]:
        raise ConfigError(f"unknown key {section}.{key}")
    cp[section][key] = value


def _params(text: str) -> tuple[str, dict[str, str]]:
    parts = text.split()
    if not parts:
        raise ConfigError("empty function specification")
    name, params = parts[0], {}
    for p in parts[1:]:
        if "=" not in p:
            raise ConfigError(f"parameter {p!r} in {text!r} is not key=value")
        k, v = p.split("=", 1)
        params[k] = v
    return name, params


def _num(params, key, default=None, text=""):
    if key not in params:
        if default is None:
            raise ConfigError(f"missing parameter {key!r} in {text!r}")
        return default
    try:
        return float(params.pop(key))
    except ValueError:
        raise ConfigError(f"parameter {key!r} in {text!r} must be a number") from None


def _list(params, key, text):
    if key not in params:
        raise ConfigError(f"missing parameter {key!r} in {text!r}")
    try:
        return [float(v) for v in params.pop(key).split(";")]
    except ValueError:
        raise ConfigError(f"parameter {key!r} in {text!r} must be ';'-separated numbers") from None


def parse_coefficient(text: str, shape: tuple):
    """Built-in coefficient map from ``name key=value ...``."""
    name, params = _params(text)
    if name == "constant":
        m = Constant(_num(params, "value", text=text), shape)
    elif name == "affine":
        m = Affine(shape, _num(params, "c0", 0.0), _num(params, "cx", 0.0), _num(params, "ca", 0.0))
    elif name == "table":
        try:
            m = Table(_list(params, "xs", text), _list(params, "values", text), shape)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    else:
        raise ConfigError(f"unknown coefficient kind {name!r} (use constant, affine or table)")
    if params:
        raise ConfigError(f"unknown parameters {sorted(params)} in {text!r}")
    return m


def parse_test_function(text: str, box) -> TestFunction:
    name, params = _params(text)
    if name == "constant":
        f = constant_function(_num(params, "value", text=text))
    elif name == "gaussian":
        f = gaussian_function(_num(params, "center", 0.0), _num(params, "scale", 1.0),
                              _num(params, "amplitude", 1.0), box=[tuple(box)])
    else:
        raise ConfigError(f"unknown function kind {name!r} (use constant or gaussian)")
    if params:
        raise ConfigError(f"unknown parameters {sorted(params)} in {text!r}")
    return f


def _sup_on_controls(m, controls: ControlSet) -> float:
    """Declared bound of a config coefficient: exact for x-independent maps, else inf."""
    if isinstance(m, Constant):
        return m.sup()
    if isinstance(m, Affine) and not np.any(m.cx):
        x = np.zeros((len(controls), 1))
        vals = m(x, np.empty((len(controls), 0)), controls.points)
        return float(np.max(np.abs(vals)))
    if isinstance(m, Table):
        return float(np.max(np.abs(m.values)))
    return math.inf
