"""Constrained distributionally robust optimisation through the dual reformulation."""

from .data import Dataset, gen_imbalanced, load_csv, make_rng, sample_batch
from .divergence import DivergenceError, DivergenceSpec, Family, phi, phi_conj, phi_conj_grad
from .dual import (
    DualDomain,
    DualPoint,
    ObjectiveConstants,
    batch_grad_x,
    batch_grad_z,
    batch_objective,
    compute_constants,
    compute_domain,
    f_sample,
    grad_x_sample,
    grad_z_sample,
    sampling_bias_bound,
)
from .losses import ConstantLoss, LossConstants, SquashedLogistic, TinyMLP, finite_diff_check
from .oracle import WorstCaseResult, dual_min, primal_worst_case, regularized_constrained_value
from .solvers import SolverConfig, SolverOutput, erm_sgd, lmo_box, pan_dro, pgd, sfk_dro, theory_hyperparams

