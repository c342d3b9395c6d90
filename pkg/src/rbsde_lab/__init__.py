"""Numerical laboratory for reflected BSDEs with nonpositive jumps.

Double penalization, its dual controller/discount game and the limiting
HJB-Isaacs variational inequality, cross-checked by finite differences,
least-squares Monte Carlo and chain dynamic programming.
"""

from .model import MarkSet, ModelError, ModelSpec, build_mark_set, supersolution_bound, validate_model
from .forward import PathBundle, TimeGrid, empirical_moments, sample_jump_schedule, simulate_paths
from .pde import (CFLError, Grid, GridFunction, PenaltyParams, a_spread, apply_dynkin, build_grid,
                  solve_hjb_isaacs, solve_penalized, solve_reflected_penalized)
from .dual import (DualPolicies, MarkovChain, build_chain, evaluate_dual_mc, gap_at_policy,
                   inf_theta_term, saddle_dp, sup_nu_linear)
from .oracles import (TestProblem, binomial_american, compare_values, controller_stopper_dp,
                      get_problem)
from .lsmc import BsdeSolution, RegressionBasis, constraint_residuals, regression_fit, solve_bsde
from .config import ExperimentSpec, emit_config, parse_config
from .runner import emit_convergence_table, run_experiment

__version__ = "0.1.0"
