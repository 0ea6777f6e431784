"""Pair-family enumeration and cohort-level robustness runs."""

from __future__ import annotations

import contextlib
import enum
import logging
import datetime as _dt
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .embedding_store import (
    CohortManifest,
    SlideRecord,
    normalize_rows,
    read_embedding_file,
    read_embedding_header,
)
from .exceptions import EmbeddingFormatError, ValidationError
from .robustness_metrics import DEFAULT_KS, SlidePairMetrics, top_k_accuracy

log = logging.getLogger(__name__)

# Self-similarity products are cached per slide below this size (N=2896).
GRAM_CACHE_BYTES = 64 * 2**20


class PairMode(enum.Enum):
    FIXED_STAINING_CROSS_SCANNER = "fixed_staining_cross_scanner"
    FIXED_SCANNER_CROSS_STAINING = "fixed_scanner_cross_staining"
    CROSS_STAINING_CROSS_SCANNER = "cross_staining_cross_scanner"

    @property
    def title(self) -> str:
        return _TITLES[self]

    @classmethod
    def parse(cls, name: str) -> "PairMode":
        key = name.strip().lower().replace("-", "_")
        if key in _ALIASES:
            return _ALIASES[key]
        for mode in cls:
            if key in (mode.value, mode.name.lower()):
                return mode
        raise ValidationError(
            f"unknown pair mode {name!r}; expected one of "
            + ", ".join(sorted(set(_ALIASES) | {m.value for m in cls}))
        )


_TITLES = {
    PairMode.FIXED_STAINING_CROSS_SCANNER: "Fixed-staining, cross-scanner",
    PairMode.FIXED_SCANNER_CROSS_STAINING: "Fixed-scanner, cross-staining",
    PairMode.CROSS_STAINING_CROSS_SCANNER: "Cross-staining, cross-scanner",
}
_ALIASES = {
    "fixed_staining": PairMode.FIXED_STAINING_CROSS_SCANNER,
    "cross_scanner": PairMode.FIXED_STAINING_CROSS_SCANNER,
    "fixed_scanner": PairMode.FIXED_SCANNER_CROSS_STAINING,
    "cross_staining": PairMode.FIXED_SCANNER_CROSS_STAINING,
    "cross_both": PairMode.CROSS_STAINING_CROSS_SCANNER,
}

ALL_MODES = tuple(PairMode)


def classify_pair(a: SlideRecord, b: SlideRecord) -> Optional[PairMode]:
    same_staining = a.staining_id == b.staining_id
    same_scanner = a.scanner_id == b.scanner_id
    if same_staining and not same_scanner:
        return PairMode.FIXED_STAINING_CROSS_SCANNER
    if same_scanner and not same_staining:
        return PairMode.FIXED_SCANNER_CROSS_STAINING
    if not same_staining and not same_scanner:
        return PairMode.CROSS_STAINING_CROSS_SCANNER
    return None


def enumerate_pairs(manifest: CohortManifest, mode: PairMode) -> list[tuple[str, str]]:
    """Unordered slide pairs of one family as sorted ``(slide_a, slide_b)`` with a < b."""
    pairs = []
    for r1, r2 in combinations(manifest.slides, 2):
        if classify_pair(r1, r2) is mode:
            a, b = sorted((r1.slide_id, r2.slide_id))
            pairs.append((a, b))
    pairs.sort()
    return pairs


def aggregate_median_iqr(values: Sequence[float]) -> tuple[float, float]:
    """Median and Q75 - Q25 with linear interpolation at positions p * (n - 1)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValidationError("cannot aggregate an empty list")
    q25, q50, q75 = np.quantile(v, [0.25, 0.5, 0.75], method="linear")
    return float(q50), float(max(q75 - q25, 0.0))


def metric_names(ks: Iterable[int]) -> list[str]:
    return ["mean_cosine"] + [f"top_k@{k}" for k in ks]


def metric_value(m: SlidePairMetrics, name: str) -> float:
    if name == "mean_cosine":
        return m.mean_cosine
    return m.topk_accuracy[int(name.split("@", 1)[1])]


@dataclass(frozen=True)
class AggregateRow:
    mode: PairMode
    metric: str
    median: float
    iqr: float
    n_pairs: int


def aggregate_pairs(pairs: dict, ks: Sequence[int]) -> list[AggregateRow]:
    """One row per (mode, metric); modes without pairs produce no rows."""
    rows = []
    for mode in ALL_MODES:
        results = pairs.get(mode)
        if not results:
            continue
        results = sorted(results, key=lambda m: (m.slide_a, m.slide_b))
        for name in metric_names(ks):
            med, iqr = aggregate_median_iqr([metric_value(m, name) for m in results])
            rows.append(AggregateRow(mode, name, med, iqr, len(results)))
    return rows


@dataclass
class RobustnessReport:
    manifest_digest: str
    ks: tuple[int, ...]
    modes: tuple[PairMode, ...]
    pairs: dict = field(default_factory=dict)
    aggregates: list = field(default_factory=list)
    workers: int = 1
    timestamp: str = ""
    n_tiles: int = 0

    def all_pairs(self) -> list[tuple[PairMode, SlidePairMetrics]]:
        return [(mode, m) for mode in ALL_MODES for m in self.pairs.get(mode, [])]


class SlideCache:
    """LRU cache of normalized slide matrices (and small self-similarity products)."""

    def __init__(self, max_resident: int = 16, gram_bytes: int = GRAM_CACHE_BYTES):
        if max_resident < 2:
            raise ValidationError("at least two slides must be resident at once")
        self.max_resident = max_resident
        self.gram_bytes = gram_bytes
        self._items: OrderedDict = OrderedDict()
        self.loads = 0

    def get(self, record: SlideRecord):
        key = record.slide_id
        if key in self._items:
            self._items.move_to_end(key)
            return self._items[key]
        matrix = load_slide(record)
        normed = normalize_rows(matrix)
        gram = None
        if normed.n_tiles**2 * 8 <= self.gram_bytes:
            gram = normed.values @ normed.values.T
        self._items[key] = (normed, gram)
        self.loads += 1
        while len(self._items) > self.max_resident:
            self._items.popitem(last=False)
        return self._items[key]


def load_slide(record: SlideRecord):
    try:
        matrix = read_embedding_file(record.path)
    except FileNotFoundError:
        raise FileNotFoundError(f"slide {record.slide_id!r}: embedding file not found: {record.path}") from None
    except EmbeddingFormatError as exc:
        raise EmbeddingFormatError(f"slide {record.slide_id!r}: {exc}") from None
    except OSError as exc:
        raise OSError(f"slide {record.slide_id!r}: cannot read {record.path}: {exc}") from None
    if matrix.shape != (record.n_tiles, record.dim):
        raise EmbeddingFormatError(
            f"slide {record.slide_id!r}: file holds {matrix.n_tiles}x{matrix.dim}, "
            f"manifest declares {record.n_tiles}x{record.dim}"
        )
    return matrix


def _check_slides(records: Iterable[SlideRecord]) -> None:
    for rec in records:
        try:
            shape = read_embedding_header(rec.path)
        except FileNotFoundError:
            raise FileNotFoundError(f"slide {rec.slide_id!r}: embedding file not found: {rec.path}") from None
        except EmbeddingFormatError as exc:
            raise EmbeddingFormatError(f"slide {rec.slide_id!r}: {exc}") from None
        if shape != (rec.n_tiles, rec.dim):
            raise EmbeddingFormatError(
                f"slide {rec.slide_id!r}: file holds {shape[0]}x{shape[1]}, "
                f"manifest declares {rec.n_tiles}x{rec.dim}"
            )


def run_benchmark(
    manifest: CohortManifest,
    ks: Sequence[int] = DEFAULT_KS,
    modes: Sequence[PairMode] = ALL_MODES,
    workers: int = 1,
    *,
    max_resident_slides: int = 16,
    progress: Optional[Callable[[int, int], None]] = None,
) -> RobustnessReport:
    """Compute pair metrics for every pair of the requested families and aggregate.

    Pairs run in sorted order; query blocks of each pair are spread over
    ``workers`` threads.  Output does not depend on ``workers``.
    """
    ks = tuple(sorted(set(int(k) for k in ks)))
    if not ks or ks[0] < 1:
        raise ValidationError(f"k values must be positive, got {ks}")
    if workers < 1:
        raise ValidationError("workers must be >= 1")
    modes = tuple(m for m in ALL_MODES if m in set(modes))
    if not modes:
        raise ValidationError("no pair modes requested")

    work = []
    for mode in modes:
        work.extend((a, b, mode) for a, b in enumerate_pairs(manifest, mode))
    work.sort()
    used = sorted({s for a, b, _ in work for s in (a, b)})
    _check_slides(manifest[s] for s in used)

    cache = SlideCache(max_resident_slides)
    pairs: dict = {mode: [] for mode in modes}
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    # one BLAS thread per worker; parallelism lives in the pool
    limits = threadpool_limits(limits=1, user_api="blas") if pool else contextlib.nullcontext()
    try:
        with limits:
            for done, (a, b, mode) in enumerate(work, start=1):
                va, ga = cache.get(manifest[a])
                vb, gb = cache.get(manifest[b])
                m = top_k_accuracy(
                    va, vb, ks, slide_a=a, slide_b=b,
                    executor=pool, gram_a=ga, gram_b=gb,
                )
                pairs[mode].append(m)
                if progress is not None:
                    progress(done, len(work))
    finally:
        if pool is not None:
            pool.shutdown()

    for mode in modes:
        pairs[mode].sort(key=lambda m: (m.slide_a, m.slide_b))
    log.info("computed %d pairs, %d slide loads", len(work), cache.loads)
    return RobustnessReport(
        manifest_digest=manifest.digest,
        ks=ks,
        modes=modes,
        pairs=pairs,
        aggregates=aggregate_pairs(pairs, ks),
        workers=workers,
        timestamp=_dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        n_tiles=manifest.n_tiles,
    )

