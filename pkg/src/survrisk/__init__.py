"""Survival risk models for clustered cohorts, with calibration and decision metrics.

The package fits Cox, shared-frailty and boosted Cox models to right-censored
cohort data and evaluates horizon risk predictions by discrimination
(truncated Harrell and IPCW concordance), calibration (O/E, calibration line,
GND test) and clinical utility (net benefit, decision curves).
"""

__version__ = "0.1.0"

from .boosting import BoostConfig, BoostedModel, predict_risk_boosted, train_boosted
from .calibration import (calibration_line, calibration_plot_data, decision_curve, gnd_test,
                          nb_difference_to_counts, net_benefit, observed_expected, poisson_glm)
from .cohort import (Cohort, LocationMap, Subject, apply_eligibility, load_cohort,
                     merge_locations, split_train_test, write_cohort)
from .concordance import harrell_c, ipcw_c
from .cox import CoxFit, breslow_baseline, encode_design, fit_cox, partial_loglik_and_gradient, predict_risk
from .errors import (ConfigError, ConvergenceError, DataError, NumericalError, RankError,
                     SurvRiskError, UndefinedMetricError)
from .estimators import censoring_survival, kaplan_meier
from .frailty import FrailtyFit, fit_gamma_frailty, predict_risk_frailty
from .harness import (SubgroupSpec, compare_models, evaluate_model, evaluate_subgroups,
                      tune_boost_hyperparameters)
from .models import RiskModel, fit_model, load_model, save_model
from .simulate import SimulationConfig, simulate_cohort
