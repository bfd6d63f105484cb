"""Continuous integration for machine-learning models with (eps, delta) guarantees."""

from mlci.dsl import CiScript, Formula, parse_condition, parse_script
from mlci.estimator import ReliabilitySpec, SamplePlan, estimate, estimate_script
from mlci.evaluator import PredictionSet, compute_stats, eval_formula
from mlci.session import Session, open_session

__version__ = "0.1.0"

__all__ = [
    "CiScript",
    "Formula",
    "PredictionSet",
    "ReliabilitySpec",
    "SamplePlan",
    "Session",
    "compute_stats",
    "estimate",
    "estimate_script",
    "eval_formula",
    "open_session",
    "parse_condition",
    "parse_script",
]
