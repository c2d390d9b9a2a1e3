"""Metrics and evaluation harness. Study drivers live in :mod:`qgc.evaluation.studies`."""
from .harness import compressed_accuracy, matched_budget, predict, qgc_inputs, score_predictions, truncated_input
from .metrics import (
    SETTINGS,
    EvalResult,
    ThroughputReport,
    accuracy,
    compression_ratio,
    corpus_compression_ratio,
    exact_match,
    f1,
    normalize,
    throughput,
)

__all__ = [
    "SETTINGS", "EvalResult", "ThroughputReport", "accuracy", "compressed_accuracy", "compression_ratio",
    "corpus_compression_ratio", "exact_match", "f1", "matched_budget", "normalize", "predict", "qgc_inputs",
    "score_predictions", "throughput", "truncated_input",
]
