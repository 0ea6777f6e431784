"""Paired model-comparison statistics.

One-sided Wilcoxon signed-rank (exact or normal approximation), Holm
step-down adjustment, paired bootstrap p-values and the harmonic-mean
p-value used to combine dependent tests.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence, Union

import numpy as np

from .downstream_eval import auc, average_ranks
from .exceptions import ValidationError

EXACT_MAX_N = 25
# |differences| are compared at this resolution so that ties in decimal
# score tables are not split by binary representation error.
TIE_DECIMALS = 12


@dataclass(frozen=True)
class PairedSamples:
    task_ids: tuple
    scores_a: np.ndarray
    scores_b: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.scores_a, dtype=np.float64)
        b = np.asarray(self.scores_b, dtype=np.float64)
        if a.ndim != 1 or a.shape != b.shape or a.size == 0:
            raise ValidationError("paired scores must be equal-length non-empty vectors")
        if len(self.task_ids) != a.size:
            raise ValidationError("one task id per paired score is required")
        if len(set(self.task_ids)) != len(self.task_ids):
            raise ValidationError("task ids must be unique")
        object.__setattr__(self, "scores_a", a)
        object.__setattr__(self, "scores_b", b)
        object.__setattr__(self, "task_ids", tuple(self.task_ids))

    @classmethod
    def from_arrays(cls, scores_a, scores_b, task_ids=None) -> "PairedSamples":
        n = len(scores_a)
        return cls(tuple(range(n)) if task_ids is None else tuple(task_ids), scores_a, scores_b)


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p_value: float
    n_effective: int
    method: str  # "exact" | "normal-approx" | "bootstrap" | "degenerate"
    degenerate: bool = False
    redraws: int = 0

    __test__ = False  # not a pytest class


def _signed_rank_counts(n: int) -> list[int]:
    """Number of sign patterns of ranks 1..n giving each positive-rank sum."""
    total = n * (n + 1) // 2
    counts = [0] * (total + 1)
    counts[0] = 1
    top = 0
    for r in range(1, n + 1):
        top += r
        for s in range(top, r - 1, -1):
            counts[s] += counts[s - r]
    return counts


def _norm_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def wilcoxon_one_sided(samples: PairedSamples, alternative: str = "greater") -> TestResult:
    """Signed-rank test of "A stochastically greater than B" (or "less").

    Zero differences are dropped.  The exact null distribution is used when
    at most ``EXACT_MAX_N`` nonzero differences remain and their absolute
    values are untied; otherwise a normal approximation with tie and
    continuity corrections.  The statistic is the sum of positive ranks.
    """
    if alternative not in ("greater", "less"):
        raise ValidationError("alternative must be 'greater' or 'less'")
    d = samples.scores_a - samples.scores_b
    d = np.round(d, TIE_DECIMALS)
    d = d[d != 0.0]
    n = d.size
    if n == 0:
        return TestResult(0.0, 1.0, 0, "degenerate", degenerate=True)
    ranks = average_ranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w = w_plus if alternative == "greater" else float(ranks[d < 0].sum())
    has_ties = len(np.unique(np.abs(d))) < n

    if n <= EXACT_MAX_N and not has_ties:
        counts = _signed_rank_counts(n)
        w_int = int(round(w))
        p = sum(counts[w_int:]) / 2**n
        return TestResult(w_plus, float(p), n, "exact")

    mean = n * (n + 1) / 4.0
    _, tie_sizes = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_sizes**3 - tie_sizes)) / 48.0
    z = (w - mean - 0.5) / math.sqrt(var)
    p = min(1.0, _norm_sf(z))
    return TestResult(w_plus, p, n, "normal-approx")


def wilcoxon_exact_distribution(n: int) -> np.ndarray:
    """P(W+ = w) for w = 0..n(n+1)/2 under the untied null."""
    counts = _signed_rank_counts(n)
    return np.array(counts, dtype=np.float64) / 2**n


def holm_correction(p_values: Sequence[float], alpha: float = 0.05):
    """Holm step-down adjustment; returns ``(adjusted, reject)`` in input order."""
    p = np.asarray(p_values, dtype=np.float64)
    if p.ndim != 1:
        raise ValidationError("p-values must form a vector")
    if ((p <= 0) | (p > 1)).any():
        raise ValidationError("p-values must lie in (0, 1]")
    m = p.size
    order = np.argsort(p, kind="mergesort")
    adjusted = np.empty(m)
    running = 0.0
    for pos, idx in enumerate(order):
        running = max(running, min(1.0, (m - pos) * p[idx]))
        adjusted[idx] = running
    reject = np.zeros(m, dtype=bool)
    for idx in order:
        if adjusted[idx] > alpha:
            break
        reject[idx] = True
    return adjusted.tolist(), reject.tolist()


def harmonic_mean_p(p_values: Sequence[float]) -> float:
    p = np.asarray(p_values, dtype=np.float64)
    if p.size == 0:
        raise ValidationError("harmonic mean of an empty list")
    if ((p <= 0) | (p > 1)).any():
        raise ValidationError("p-values must lie in (0, 1]")
    return float(p.size / np.sum(1.0 / p))


_METRICS = {"auc": auc}


def paired_bootstrap_p(
    scores_a,
    scores_b,
    labels,
    metric: Union[str, Callable] = "auc",
    n_boot: int = 1000,
    seed: int = 0,
    groups=None,
    max_redraws: int = 10_000,
) -> TestResult:
    """One-sided bootstrap p-value for metric(A) > metric(B) on shared samples.

    Rows (or whole groups, when ``groups`` is given) are resampled with
    replacement.  Resample ``b`` draws from its own generator seeded by
    ``(seed, b)``; resamples on which the metric is undefined are redrawn
    from the same stream and counted.
    p = (1 + #{delta_b <= 0}) / (n_boot + 1).
    """
    if n_boot < 100:
        raise ValidationError("n_boot must be at least 100")
    fn = _METRICS[metric] if isinstance(metric, str) else metric
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    y = np.asarray(labels)
    if not (a.shape == b.shape == y.shape) or a.ndim != 1:
        raise ValidationError("scores and labels must be equal-length vectors")
    observed = fn(a, y) - fn(b, y)

    if groups is None:
        units = [np.array([i]) for i in range(a.size)]
    else:
        g = np.asarray(groups)
        keys = sorted(set(g.tolist()))
        units = [np.flatnonzero(g == k) for k in keys]
    n_units = len(units)

    redraws = 0
    n_le = 0
    for rep in range(n_boot):
        rng = np.random.default_rng([seed, rep])
        while True:
            pick = rng.integers(0, n_units, size=n_units)
            idx = np.concatenate([units[u] for u in pick])
            try:
                delta = fn(a[idx], y[idx]) - fn(b[idx], y[idx])
                break
            except ValidationError:
                redraws += 1
                if redraws > max_redraws:
                    raise ValidationError("metric undefined on too many resamples") from None
        if delta <= 0:
            n_le += 1
    p = (1 + n_le) / (n_boot + 1)
    return TestResult(float(observed), p, a.size, "bootstrap", redraws=redraws)


# ---------------------------------------------------------------- score tables


def load_scores_table(path) -> dict:
    """Read a ``model,task,score`` CSV into ``{model: {task: score}}``."""
    table: dict = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"model", "task", "score"} - set(reader.fieldnames or [])
        if missing:
            raise ValidationError(f"{path}: missing column(s) {', '.join(sorted(missing))}")
        for lineno, row in enumerate(reader, start=2):
            try:
                score = float(row["score"])
            except ValueError:
                raise ValidationError(f"{path}:{lineno}: bad score {row['score']!r}") from None
            tasks = table.setdefault(row["model"], {})
            if row["task"] in tasks:
                raise ValidationError(f"{path}:{lineno}: duplicate score for {row['model']}/{row['task']}")
            tasks[row["task"]] = score
    return table


def paired_from_table(table: dict, model_a: str, model_b: str, exclude_tasks=()) -> PairedSamples:
    for m in (model_a, model_b):
        if m not in table:
            raise ValidationError(f"model {m!r} not in score table")
    tasks = sorted(
        (set(table[model_a]) & set(table[model_b])) - set(exclude_tasks)
    )
    if not tasks:
        raise ValidationError(f"no shared tasks between {model_a!r} and {model_b!r}")
    return PairedSamples(
        tuple(tasks),
        [table[model_a][t] for t in tasks],
        [table[model_b][t] for t in tasks],
    )


@dataclass(frozen=True)
class Comparison:
    model_a: str
    model_b: str
    result: TestResult
    adjusted_p: float
    reject: bool


def compare_models(
    table: dict,
    comparisons: Sequence[tuple[str, str]],
    alpha: float = 0.05,
    exclude_tasks=(),
) -> list[Comparison]:
    """One-sided Wilcoxon for each ``(a, b)`` ("a better than b"), Holm over the family."""
    results = [
        wilcoxon_one_sided(paired_from_table(table, a, b, exclude_tasks), "greater")
        for a, b in comparisons
    ]
    adjusted, reject = holm_correction([r.p_value for r in results], alpha)
    return [
        Comparison(a, b, r, adj, rej)
        for (a, b), r, adj, rej in zip(comparisons, results, adjusted, reject)
    ]


def fixture_path() -> Path:
    """Location of the bundled per-task scores of the public EVA and HEST benchmarks."""
    return Path(__file__).parent / "data" / "eva_hest_scores.csv"
