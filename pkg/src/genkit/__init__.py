"""Generalize randomized-trial treatment effects to a target population.

Target-population effects come from interaction outcome models or from
membership-odds weighting. When a moderator is measured only in the trial,
or nowhere, sensitivity analyses trace the effect over assumed values, and
a Monte Carlo harness compares the trial-only moderator methods.
"""

__version__ = "0.1.0"

from .data import (DataConfig, RoleMap, StackedDataset, SummaryTable, load_config, load_csv,
                   sample_means, validate_roles, weighted_mean, weighted_sd)
from .errors import (ConfigError, ConvergenceWarning, DegenerateInputError,
                     DegenerateWeightsError, EstimationError, GenkitError, OverlapError,
                     PositivityError, PositivityWarning, ScenarioError, SeparationWarning,
                     SingularDesignError, ValidationError)
from .estimators import (BalanceReport, EffectEstimate, WeightVector, balance_report,
                         estimate_sate, estimate_tate_outcome_model, estimate_tate_weighted,
                         membership_weights)
from .numerics import (DesignMatrix, ModelFit, SplineBasis, fit_logistic, fit_ols, fit_wls,
                       mvn_sample, natural_spline_basis, spline_knots)
from .sensitivity import (SensitivityResult, USensitivitySpec, VSensitivitySpec,
                          full_weighting_weights, parse_grid, run_u, run_v, sens_u_bias_formula,
                          sens_u_weighting_plus_bias, sens_v_full_weighting,
                          sens_v_outcome_model, sens_v_weighted_outcome_model,
                          v_outcome_formula)
from .simulation import (BiasCurve, MethodSpec, ScenarioConfig, closed_form_tate,
                         generate_iteration, mirror_check, run_models, run_scenario, run_sweep)

__all__ = [name for name in dir() if not name.startswith("_")]
