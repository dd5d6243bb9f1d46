"""Optimization constrained by parametric DAEs through a pair of neural surrogates.

A constraint network learns x(t, p) offline; an online generator network then
searches the parameter box against the frozen surrogate, and the best
candidates are polished on the true model.
"""

from .problems import (
    MeasurementFitObjective,
    ObjectiveSpec,
    ParametricDaeProblem,
    QuadratureRule,
    get_problem,
)
from .integrate import SolverConfig, Trajectory, integrate, reference_solve
from .surrogate import ConstraintSurrogate, GaConfig, ga_training_loop, estimate_gamma
from .optimize import OptimizeConfig, train_objective_generator, newton_refine, random_walk_refine

__version__ = "0.1.0"
