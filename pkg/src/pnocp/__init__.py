"""Probabilistic ODE solvers inside single-shooting optimal control."""

from .odefilter import (
    DivergenceError,
    FilterStats,
    GaussianBelief,
    Linearization,
    PosteriorTrajectory,
    SingularInnovationError,
    calibrate,
    linearize,
    ode_filter_smoother,
    predict,
    rts_pass,
    update,
)
from .ocp import CostReport, OCPSpec, SolveResult, cost_and_gradient, expected_cost, gradient, solve_ocp
from .prior import IWPModel, Selectors, TransitionPair, selectors, taylor_init, transition_matrices
from .problem import ControlledIVP, Grids, InputPolicy, eval_policy, load_problem, logistic_example
from .reference import ReferenceSolution, StiffnessError, ground_truth_cost, solve_reference

__version__ = "0.1.0"
