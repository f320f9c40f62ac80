"""Controlled branching diffusions, their superprocess limit and the exponential-cost HJB.

Modules
-------
measure_space  atomic measures, test functions, pairings and the weak* metric
model          coefficients, control sets, costs and feedback policies
calculus       cylindrical functions, measure derivatives and generators
particle_sim   vectorised n-rescaled branching-diffusion simulator
hjb_solver     explicit monotone solver for the exponential-case HJB PDE
mc_harness     Monte Carlo cost evaluation and verification checks
"""

from .measure_space import (
    AtomicMeasure,
    SeparatingFamily,
    TestFunction,
    constant_function,
    default_family,
    discretize,
    distance,
    gaussian_function,
    pair,
)

__version__ = "0.1.0"

__all__ = [
    "AtomicMeasure",
    "SeparatingFamily",
    "TestFunction",
    "constant_function",
    "default_family",
    "discretize",
    "distance",
    "gaussian_function",
    "pair",
]
