"""Grouped generalized estimating equations for longitudinal data.

Subjects are partitioned into ``G`` latent groups that share regression
coefficients, while the within-subject correlation is handled through a
working correlation matrix used both in estimation and in assigning
subjects to groups.

>>> from grouped_gee import simulate, SimScenario, fit
>>> sim = simulate(SimScenario(n=90, T=10, seed=1))
>>> result = fit(sim.data, "bernoulli", G=3, corr_structure="EX")
>>> result.betas.shape
(3, 3)
"""
from .correlation import (CorrelationFactor, MomentMatrix, Structure, WorkingCorrelationSpec,
                          build_matrix, empirical_moment_matrix, estimate_alpha, pd_repair)
from .data import Block, LongitudinalDataset, Subject
from .exceptions import (ContractError, DataError, EmptyGroupError, GroupedGEEError, NumericError,
                         ParameterError, SchemaError)
from .families import Family, FamilySpec, subject_matrices
from .grouping import (FitOptions, GroupedFit, InitKind, InitStrategy, assign_groups, distance_matrix,
                       fit, init_fit, mahalanobis_distance)
from .io import read_fit_json, read_long_csv, write_fit_json, write_long_csv
from .model_selection import CvaResult, cva_select, instability, split_three, test_assignments
from .simulation import (MetricReport, Scenario, SimScenario, SimulatedData, align_labels,
                         average_squared_loss, classification_error, gen_binary_longitudinal,
                         gen_covariates, metrics, simulate, truth_ar1, truth_ex)
from .solver import GEEFit, GroupFit, SolverOptions, fit_gee, sandwich_cov, score, solve_group_gee

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
