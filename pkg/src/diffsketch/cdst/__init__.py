"""Condition diffusion sampling for training, plus the analyses that justify it."""

from .confidence import confidence_scores, embed_pairs, similarity
from .normality import MardiaResult, mardia_test, shapiro_wilk
from .sampling import (
    CdstState,
    ConditionDistribution,
    fit_condition_distribution,
    load_distribution,
    sample_condition,
    save_distribution,
    schedule,
)
from .transport import emd

__all__ = [
    "CdstState",
    "ConditionDistribution",
    "MardiaResult",
    "confidence_scores",
    "embed_pairs",
    "emd",
    "fit_condition_distribution",
    "load_distribution",
    "mardia_test",
    "sample_condition",
    "save_distribution",
    "schedule",
    "shapiro_wilk",
    "similarity",
]
