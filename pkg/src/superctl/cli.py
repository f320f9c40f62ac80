"""Command-line entry point: ``superctl <subcommand> [--config F] [--seed S] [--workers K] [--out D] [--set k=v]``.

Exit status is 0 on success / PASS, 1 on FAIL and 2 on configuration errors.
Every run echoes the resolved configuration to ``<out>/config.resolved.ini``;
CSV outputs start with a ``# superctl config_hash=...`` comment line followed
by the header row, and contain no timestamps.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import acceptance
from .config import ConfigError, ExperimentConfig
from .hjb_solver import residual_check, solve_w, value_of_measure
from .mc_harness import (
    Report,
    convergence_study,
    dpp_check,
    evaluate_cost,
    exponential_cost,
    verify_optimality,
)
from .measure_space import AtomListSpec, constant_function
from .particle_sim import DistanceToZero, Pairing, simulate_batch

logger = logging.getLogger("superctl")

FAIL_MARKER = "FAILED"


class Outputs:
    def __init__(self, out: Path, cfg: ExperimentConfig):
        self.out = out
        self.cfg = cfg
        out.mkdir(parents=True, exist_ok=True)
        marker = out / FAIL_MARKER
        if marker.exists():
            marker.unlink()
        (out / "config.resolved.ini").write_text(f"# superctl config_hash={cfg.hash}\n" + cfg.to_text())

    def csv(self, name: str, header, rows):
        buf = io.StringIO()
        buf.write(f"# superctl config_hash={self.cfg.hash}\n")
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(header)
        wr.writerows(rows)
        (self.out / name).write_text(buf.getvalue())

    def text(self, name: str, body: str):
        (self.out / name).write_text(body)

    def json(self, name: str, obj: dict):
        obj = {"config_hash": self.cfg.hash, **obj}
        (self.out / name).write_text(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n")

    def report(self, stem: str, rep: Report):
        rep.provenance["config_hash"] = self.cfg.hash
        rep.provenance["family_fingerprint"] = self.cfg.family().fingerprint()
        self.json(f"{stem}.json", rep.to_dict())
        self.text(f"{stem}.txt", f"# superctl config_hash={self.cfg.hash}\n" + rep.to_text())

    def fail(self, reason: str):
        (self.out / FAIL_MARKER).write_text(reason + "\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_simulate(cfg: ExperimentConfig, out: Outputs) -> int:
    sp = cfg.sim_params()
    h = cfg.terminal()
    record = (Pairing(constant_function(1.0), "mass"), Pairing(h, "pair_h"), DistanceToZero(cfg.family(), 1.0, "dist0"))
    sim = cfg.sim_config(record=record, record_steps=sp["timeseries"])
    lam = cfg.initial_measure()
    policy = cfg.policy(_solve(cfg) if cfg.get("policy", "kind") == "surface" else None)
    res = simulate_batch(None, lam, policy, sim, cfg.coefficients(), workers=cfg.workers)
    out.csv("simulate_summary.csv", *res.summary_rows())
    if sp["timeseries"]:
        out.csv("simulate_timeseries.csv", *res.timeseries_rows())
    masses = res.terminal("mass")[~res.censored]
    out.json("simulate.json", {
        "replicates": res.replicates, "censored": res.n_censored,
        "mean_terminal_mass": float(np.mean(masses)) if masses.size else None,
        "extinct_fraction": float(np.mean(~np.isnan(res.extinct_at))),
        "policy": policy.describe(), "seed": cfg.seed, "family_fingerprint": cfg.family().fingerprint(),
    })
    print(f"simulated {res.replicates} replicates ({res.n_censored} censored)")
    return 0


def _solve(cfg: ExperimentConfig):
    return solve_w(cfg.coefficients(), cfg.terminal(), cfg.grid(), cfg.controls())


def cmd_solve(cfg: ExperimentConfig, out: Outputs) -> int:
    surface = _solve(cfg)
    res = residual_check(surface, cfg.coefficients())
    tol = cfg.grid_params()["residual_tol"]
    lam = cfg.initial_measure()
    v0 = value_of_measure(surface, surface.grid.t0, lam) if _inside(surface, lam) else None
    out.text("surface.csv", surface.to_csv(cfg.hash))
    out.json("surface.json", {**surface.header(), "residual": res.to_dict(), "residual_tol": tol,
                              "value_initial": v0, "passed": res.max_abs <= tol})
    print(f"max residual {res.max_abs:.3e} (tolerance {tol:g})")
    if res.max_abs > tol:
        out.fail(f"residual {res.max_abs} exceeds {tol}")
        return 1
    return 0


def _inside(surface, lam) -> bool:
    x = lam.locations[:, 0]
    return bool(np.all((x >= surface.grid.x_min) & (x <= surface.grid.x_max)))


def cmd_evaluate(cfg: ExperimentConfig, out: Outputs) -> int:
    surface = _solve(cfg) if cfg.get("policy", "kind") == "surface" else None
    policy = cfg.policy(surface)
    sp = cfg.sim_params()
    est = evaluate_cost(sp["t0"], cfg.initial_measure(), policy, exponential_cost(cfg.terminal()), cfg.sim_config(),
                        cfg.coefficients(), cfg.workers)
    out.csv("evaluate.csv", ["policy", "mean", "std_error", "replicates", "censored"],
            [[policy.label, repr(est.mean), repr(est.std_error), est.replicates, est.censored]])
    out.json("evaluate.json", {"policy": policy.describe(), "estimate": est.to_dict(), "seed": cfg.seed})
    print(f"J({policy.label}) = {est}")
    return 0


def _report_exit(out: Outputs, stem: str, rep: Report) -> int:
    out.report(stem, rep)
    out.csv(f"{stem}.csv", ["clause", "value", "bound", "passed"],
            [[c.name, repr(float(c.value)), repr(float(c.bound)), int(c.passed)] for c in rep.clauses])
    print(rep.to_text(), end="")
    if not rep.passed:
        out.fail(f"{stem} FAIL")
        return 1
    return 0


def cmd_verify(cfg: ExperimentConfig, out: Outputs) -> int:
    surface = _solve(cfg)
    sp = cfg.sim_params()
    rep = verify_optimality(surface, sp["t0"], cfg.initial_measure(), cfg.alternatives(), cfg.sim_config(),
                            cfg.coefficients(), cfg.terminal(), bias=cfg.kappa / sp["level"], workers=cfg.workers)
    return _report_exit(out, "verify", rep)


def cmd_dpp(cfg: ExperimentConfig, out: Outputs) -> int:
    surface = _solve(cfg)
    sp = cfg.sim_params()
    tau = float(cfg.get("verify", "tau"))
    rep = dpp_check(surface, sp["t0"], cfg.initial_measure(), tau, cfg.sim_config(), cfg.coefficients(),
                    cfg.terminal(), bias=cfg.kappa / sp["level"], workers=cfg.workers)
    return _report_exit(out, "dpp", rep)


def cmd_scaling(cfg: ExperimentConfig, out: Outputs) -> int:
    sc = cfg.scaling_params()
    # the initial condition is re-discretised at every level of the ladder
    atoms = [item.split(":") for item in cfg.get("initial", "atoms").split(",")]
    spec = AtomListSpec(np.array([[float(x)] for x, _ in atoms]), np.array([float(w) for _, w in atoms]))
    policy = cfg.policy(_solve(cfg) if cfg.get("policy", "kind") == "surface" else None)
    sp = cfg.sim_params()
    rep = convergence_study(sp["t0"], spec, policy, sc["phi"], sc["levels"], cfg.sim_config(), cfg.coefficients(),
                            cfg.workers)
    out.csv("scaling_levels.csv", ["level", "variance", "se", "replicates", "censored"],
            [[r["level"], repr(r["variance"]), repr(r["se"]), r["replicates"], r["censored"]]
             for r in rep.numbers["levels"]])
    return _report_exit(out, "scaling", rep)


def cmd_selftest(cfg: ExperimentConfig, out: Outputs, only=None) -> int:
    ctx = acceptance.Context(cfg.seed, cfg.workers, cfg.kappa)
    results = acceptance.run_all(ctx, only=only, log=lambda line: print(line, flush=True))
    out.text("acceptance.csv", acceptance.rows_csv(results, cfg.hash))
    out.json("acceptance.json", {"seed": cfg.seed, "criteria": [r.to_dict() for r in results],
                                 "all_passed": all(r.status == "PASS" for r in results)})
    summary = "\n".join(r.line() for r in results) + "\n"
    out.text("summary.txt", f"# superctl config_hash={cfg.hash}\n" + summary)
    failed = [r.number for r in results if r.status != "PASS"]
    if failed:
        out.fail(f"criteria failed: {failed}")
        return 1
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "solve-hjb": cmd_solve,
    "evaluate": cmd_evaluate,
    "verify": cmd_verify,
    "dpp": cmd_dpp,
    "scaling": cmd_scaling,
    "selftest": cmd_selftest,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="superctl", description=__doc__.split("\n")[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="INI file (default: the shipped default config)")
    p.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    p.add_argument("--workers", type=int, help="worker processes (default: all cores)")
    p.add_argument("--out", default="superctl-out", help="output directory")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override a config value (repeatable)")
    p.add_argument("--only", type=int, action="append", help="selftest: run only these criteria")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    overrides = list(args.overrides)
    workers = args.workers if args.workers is not None else os.cpu_count() or 1
    overrides.append(f"experiment.workers={workers}")
    try:
        if args.config:
            cfg = ExperimentConfig.load(args.config, overrides, args.seed)
        else:
            cfg = ExperimentConfig.shipped("default", overrides=overrides, seed=args.seed)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = Outputs(Path(args.out), cfg)
    try:
        if args.command == "selftest":
            return cmd_selftest(cfg, out, args.only)
        return COMMANDS[args.command](cfg, out)
    except ConfigError as exc:
        out.fail(str(exc))
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # partial artifacts stay on disk next to the marker
        out.fail(f"{type(exc).__name__}: {exc}")
        raise


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
