"""Evaluation statistics for judged and rated hypotheses."""

from .bradley_terry import (
    BTFit,
    ComparisonRecord,
    Outcome,
    fit_bradley_terry,
    read_comparisons,
    simulate_comparisons,
    write_comparisons,
)
from .davidson import DavidsonFit, fit_davidson
from .metrics import MetricsReport, classification_metrics
from .quasi import QuasiVariances, comparison_interval, quasi_variances, write_fit_csv
from .rasch import RaschData, RaschFit, category_probabilities, fit_rasch_map, read_ratings
from .similarity import SimilarityEval, cosine_similarity, temporal_similarity_eval
from .tournament import classify_relations, run_pairwise_tournament

__all__ = [
    "BTFit",
    "ComparisonRecord",
    "DavidsonFit",
    "MetricsReport",
    "Outcome",
    "QuasiVariances",
    "RaschData",
    "RaschFit",
    "SimilarityEval",
    "category_probabilities",
    "classification_metrics",
    "classify_relations",
    "comparison_interval",
    "cosine_similarity",
    "fit_bradley_terry",
    "fit_davidson",
    "fit_rasch_map",
    "quasi_variances",
    "read_comparisons",
    "read_ratings",
    "run_pairwise_tournament",
    "simulate_comparisons",
    "temporal_similarity_eval",
    "write_comparisons",
    "write_fit_csv",
]
