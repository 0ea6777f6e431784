"""Slide-pair robustness metrics: mean cosine similarity and top-k retrieval.

For a query tile ``a_i`` of slide A, the rank of its match ``b_i`` is the
number of tiles ``t`` in A u B, ``t != a_i``, with
``cos(a_i, t) >= cos(a_i, b_i)``.  The match itself always counts, so the
rank lies in ``[1, 2N - 1]``.  Directed top-k accuracy is the fraction of
queries with rank <= k; the pair value averages both directions.

Ranks are obtained by counting, never by sorting: the full N x 2N
similarity matrix is never materialised.  Candidate similarities come from
float64 BLAS in fixed-size query blocks; entries whose BLAS value is within
the rounding bound of the threshold are recomputed with the reference
left-to-right dot product (see ``_kernels``), so every ``>=`` decision is
exact and independent of blocking, BLAS build and worker count.
"""

from __future__ import annotations

import math
from concurrent.futures import Executor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import _kernels
from .embedding_store import EmbeddingMatrix, normalize_rows
from .exceptions import ValidationError

DEFAULT_KS = (1, 5, 10)
QUERY_BLOCK = 256

_COS_CLAMP_SLACK = 1e-7


@dataclass(frozen=True)
class SlidePairMetrics:
    slide_a: str
    slide_b: str
    mean_cosine: float
    topk_accuracy: dict
    directed_a_to_b: dict
    directed_b_to_a: dict
    n_tiles: int


def cosine_similarity(t1, t2) -> float:
    t1 = np.ascontiguousarray(t1, dtype=np.float64)
    t2 = np.ascontiguousarray(t2, dtype=np.float64)
    if t1.shape != t2.shape or t1.ndim != 1:
        raise ValidationError(f"vectors must be 1-D with equal length, got {t1.shape} and {t2.shape}")
    if not (np.isfinite(t1).all() and np.isfinite(t2).all()):
        raise ValidationError("non-finite vector entry")
    n1 = math.sqrt(_kernels.strict_dot(t1, t1))
    n2 = math.sqrt(_kernels.strict_dot(t2, t2))
    if n1 == 0.0 or n2 == 0.0:
        raise ValidationError("cosine similarity undefined for a zero vector")
    c = _kernels.strict_dot(t1, t2) / (n1 * n2)
    if abs(c) > 1.0 + _COS_CLAMP_SLACK:
        raise ArithmeticError(f"cosine {c!r} outside [-1, 1] beyond rounding slack")
    return min(1.0, max(-1.0, c))


def _as_normalized(m) -> EmbeddingMatrix:
    if not isinstance(m, EmbeddingMatrix):
        m = EmbeddingMatrix.from_array(m)
    return normalize_rows(m)


def _check_pair(A: EmbeddingMatrix, B: EmbeddingMatrix) -> None:
    if A.shape != B.shape:
        raise ValidationError(f"slide shapes differ: {A.shape} vs {B.shape}")


def matched_similarities(A: EmbeddingMatrix, B: EmbeddingMatrix) -> np.ndarray:
    """Reference cosine of each matched tile pair (row i of A with row i of B)."""
    A, B = _as_normalized(A), _as_normalized(B)
    _check_pair(A, B)
    return _kernels.strict_row_dots(A.values, B.values)


def mean_cosine_similarity(A, B) -> float:
    sims = matched_similarities(A, B)
    return float(np.clip(sims, -1.0, 1.0).sum() / sims.shape[0])


def matched_rank(i: int, A, B) -> int:
    """Rank of ``B[i]`` among all tiles of A u B other than ``A[i]``, seen from ``A[i]``."""
    A, B = _as_normalized(A), _as_normalized(B)
    _check_pair(A, B)
    n = A.n_tiles
    if not 0 <= i < n:
        raise IndexError(f"query index {i} out of range for {n} tiles")
    q = A.values[i]
    thr = _kernels.strict_dot(q, B.values[i])
    rank = 0
    for j in range(n):
        if j != i and _kernels.strict_dot(q, A.values[j]) >= thr:
            rank += 1
        if _kernels.strict_dot(q, B.values[j]) >= thr:
            rank += 1
    return rank


class _PairJob:
    """Rank counts for both directions of one slide pair, split into query blocks."""

    def __init__(self, A, B, gram_a=None, gram_b=None, block=QUERY_BLOCK):
        self.A = np.ascontiguousarray(A)
        self.B = np.ascontiguousarray(B)
        self.n = self.A.shape[0]
        self.gram_a = gram_a
        self.gram_b = gram_b
        self.block = block
        self.delta = _kernels.blas_error_margin(self.A.shape[1])
        self.thresholds = _kernels.strict_row_dots(self.A, self.B)

    def tasks(self):
        for r0 in range(0, self.n, self.block):
            r1 = min(r0 + self.block, self.n)
            yield ("cross", r0, r1)
            yield ("self_a", r0, r1)
            yield ("self_b", r0, r1)

    def run(self, task):
        kind, r0, r1 = task
        rows = np.zeros(r1 - r0, dtype=np.int64)
        if kind == "cross":
            S = self.A[r0:r1] @ self.B.T
            cols = np.zeros(self.n, dtype=np.int64)
            _kernels.count_cross(S, self.A, self.B, r0, self.thresholds, self.delta, rows, cols)
            return kind, r0, r1, rows, cols
        X, gram = (self.A, self.gram_a) if kind == "self_a" else (self.B, self.gram_b)
        S = gram[r0:r1] if gram is not None else X[r0:r1] @ X.T
        _kernels.count_rows(S, X, X, r0, self.thresholds, self.delta, True, rows)
        return kind, r0, r1, rows, None

    def collect(self, results):
        rank_ab = np.zeros(self.n, dtype=np.int64)
        rank_ba = np.zeros(self.n, dtype=np.int64)
        for kind, r0, r1, rows, cols in results:
            if kind == "cross":
                rank_ab[r0:r1] += rows
                rank_ba += cols
            elif kind == "self_a":
                rank_ab[r0:r1] += rows
            else:
                rank_ba[r0:r1] += rows
        return rank_ab, rank_ba


def pair_ranks(
    A,
    B,
    *,
    executor: Optional[Executor] = None,
    gram_a: Optional[np.ndarray] = None,
    gram_b: Optional[np.ndarray] = None,
    block: int = QUERY_BLOCK,
):
    """Matched ranks in both directions plus the matched similarities.

    Returns ``(rank_a_to_b, rank_b_to_a, matched_sims)``.  ``gram_a`` /
    ``gram_b`` may carry precomputed ``A @ A.T`` BLAS products of the
    normalized matrices; they only affect speed.  Integer counts are summed,
    so results do not depend on the executor or block size.
    """
    A, B = _as_normalized(A), _as_normalized(B)
    _check_pair(A, B)
    job = _PairJob(A.values, B.values, gram_a, gram_b, block)
    tasks = list(job.tasks())
    if executor is None:
        results = [job.run(t) for t in tasks]
    else:
        results = list(executor.map(job.run, tasks))
    rank_ab, rank_ba = job.collect(results)
    return rank_ab, rank_ba, job.thresholds


def _topk_from_ranks(ranks: np.ndarray, ks: Sequence[int]) -> dict:
    n = ranks.shape[0]
    return {int(k): int(np.count_nonzero(ranks <= k)) / n for k in ks}


def _check_ks(ks) -> tuple[int, ...]:
    ks = tuple(sorted(set(int(k) for k in ks)))
    if not ks or ks[0] < 1:
        raise ValidationError(f"k values must be positive, got {ks}")
    return ks


def top_k_accuracy_directed(A, B, k: int) -> float:
    """Fraction of tiles of A whose match in B ranks within the top ``k``."""
    (k,) = _check_ks([k])
    rank_ab, _, _ = pair_ranks(A, B)
    return _topk_from_ranks(rank_ab, [k])[k]


def top_k_accuracy(
    A,
    B,
    ks: Sequence[int] = DEFAULT_KS,
    *,
    slide_a: str = "A",
    slide_b: str = "B",
    executor: Optional[Executor] = None,
    gram_a=None,
    gram_b=None,
) -> SlidePairMetrics:
    ks = _check_ks(ks)
    rank_ab, rank_ba, sims = pair_ranks(A, B, executor=executor, gram_a=gram_a, gram_b=gram_b)
    n = rank_ab.shape[0]
    ab = _topk_from_ranks(rank_ab, ks)
    ba = _topk_from_ranks(rank_ba, ks)
    both = {k: (ab[k] + ba[k]) / 2 for k in ks}
    mean_cos = float(np.clip(sims, -1.0, 1.0).sum() / n)
    return SlidePairMetrics(
        slide_a=slide_a,
        slide_b=slide_b,
        mean_cosine=mean_cos,
        topk_accuracy=both,
        directed_a_to_b=ab,
        directed_b_to_a=ba,
        n_tiles=n,
    )
