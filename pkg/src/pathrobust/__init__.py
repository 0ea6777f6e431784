"""Robustness benchmarking for pathology tile-embedding models."""

__version__ = "0.1.0"

from .benchmark_runner import PairMode, aggregate_median_iqr, enumerate_pairs, run_benchmark
from .embedding_store import (
    CohortManifest,
    EmbeddingMatrix,
    SlideRecord,
    concat_cls_mean,
    load_manifest,
    normalize_rows,
    read_embedding_file,
    write_embedding_file,
)
from .exceptions import EmbeddingFormatError, ManifestError, ValidationError
from .robustness_metrics import (
    SlidePairMetrics,
    cosine_similarity,
    matched_rank,
    mean_cosine_similarity,
    top_k_accuracy,
    top_k_accuracy_directed,
)

__all__ = [
    "CohortManifest",
    "EmbeddingFormatError",
    "EmbeddingMatrix",
    "ManifestError",
    "PairMode",
    "SlidePairMetrics",
    "SlideRecord",
    "ValidationError",
    "aggregate_median_iqr",
    "concat_cls_mean",
    "cosine_similarity",
    "enumerate_pairs",
    "load_manifest",
    "matched_rank",
    "mean_cosine_similarity",
    "normalize_rows",
    "read_embedding_file",
    "run_benchmark",
    "top_k_accuracy",
    "top_k_accuracy_directed",
    "write_embedding_file",
]
