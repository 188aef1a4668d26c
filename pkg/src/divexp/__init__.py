"""Natural policy gradient with diverse exploration through conjugate policies."""

__version__ = "0.1.0"

from .envs import LQR, Pendulum, PointMass, make_env
from .linalg import cg_solve, conjugacy_check, sym_eig
from .perturbation import (
    PerturbationSet,
    brute_force_best_set,
    conjugate_set,
    pairwise_kl_total,
    random_set,
    theorem1_oracle,
    zero_set,
)
from .policy import FisherOperator, GaussianMlpPolicy, exact_gaussian_kl, kl_quadratic
from .trpo import DeConfig, DiverseExploration, IterationRecord, TrpoConfig, run, trpo_step

__all__ = [
    "LQR",
    "Pendulum",
    "PointMass",
    "make_env",
    "cg_solve",
    "conjugacy_check",
    "sym_eig",
    "PerturbationSet",
    "brute_force_best_set",
    "conjugate_set",
    "pairwise_kl_total",
    "random_set",
    "theorem1_oracle",
    "zero_set",
    "FisherOperator",
    "GaussianMlpPolicy",
    "exact_gaussian_kl",
    "kl_quadratic",
    "DeConfig",
    "DiverseExploration",
    "IterationRecord",
    "TrpoConfig",
    "run",
    "trpo_step",
]
