"""Distributional diffusion models trained with generalized energy and kernel scores."""
from .schedule import FLOW_MATCHING, DomainError, Schedule, WeightFn
from .scoring import IMQ, RBF, Energy, Exp, KernelSpec, ScoreConfig

__version__ = "0.1.0"

__all__ = ["FLOW_MATCHING", "DomainError", "Schedule", "WeightFn", "IMQ", "RBF", "Energy", "Exp", "KernelSpec", "ScoreConfig"]
