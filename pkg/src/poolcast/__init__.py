"""Score-based estimation and evaluation of linear pools of density forecasts."""

__version__ = "0.1.0"

from .estimate import (EstimationResult, ParameterVector, estimate_constituent,
                       estimate_one_stage, estimate_two_stage, estimate_two_stage_fixed_weight)
from .models import DgpParams, simulate_dgp
from .pool import CombinationSpec, WeightVector
from .scoring import LOG_SCORE, ScoringRule, censored_log_score
from .series import ObservedSeries, SampleSplit, load_csv

__all__ = [
    "CombinationSpec", "DgpParams", "EstimationResult", "LOG_SCORE", "ObservedSeries",
    "ParameterVector", "SampleSplit", "ScoringRule", "WeightVector", "censored_log_score",
    "estimate_constituent", "estimate_one_stage", "estimate_two_stage",
    "estimate_two_stage_fixed_weight", "load_csv", "simulate_dgp",
]
