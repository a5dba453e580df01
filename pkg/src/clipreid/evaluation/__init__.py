from .features import (
    DEFAULT_MODE,
    FEATURE_MODES,
    dump_embeddings,
    dump_rankings,
    evaluate_model,
    extract_inference_feature,
    select_features,
)
from .metrics import MetricsReport, RankingResult, distance_matrix, evaluate, rank_order, validate_report
from .rank import CYTHON_AVAILABLE, evaluate_ranked, evaluate_ranked_py

__all__ = [
    "DEFAULT_MODE", "FEATURE_MODES", "dump_embeddings", "dump_rankings", "evaluate_model",
    "extract_inference_feature", "select_features", "MetricsReport", "RankingResult",
    "distance_matrix", "evaluate", "rank_order", "validate_report", "CYTHON_AVAILABLE",
    "evaluate_ranked", "evaluate_ranked_py",
]
