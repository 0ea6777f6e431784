"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines; they are
also written to the terminal when output is captured.
"""

import json
import subprocess
import sys
import textwrap
import time
from math import comb

import numpy as np
import pytest

from conftest import oracle_ranks, random_pair
from pathrobust.benchmark_runner import ALL_MODES, enumerate_pairs, run_benchmark
from pathrobust.distillation_losses import run_property_suite
from pathrobust.downstream_eval import (
    LabeledFeatures,
    SlideSample,
    run_breastbm_protocol,
    run_hest_protocol,
)
from pathrobust.reporting import AGGREGATE_FILE, PAIRS_FILE, TABLE_FILE, emit_report
from pathrobust.robustness_metrics import matched_rank, pair_ranks, top_k_accuracy
from pathrobust.stats import (
    PairedSamples,
    fixture_path,
    harmonic_mean_p,
    holm_correction,
    load_scores_table,
    paired_from_table,
    wilcoxon_one_sided,
)
from pathrobust.synth import SynthSpec, synth_cohort


@pytest.fixture
def report_line(capsys):
    def emit(number, ok, text):
        with capsys.disabled():
            print(f"\nACCEPTANCE {number}: {'PASS' if ok else 'FAIL'}  {text}")

    return emit


def test_1_oracle_equivalence(report_line):
    start = time.perf_counter()
    mismatches = 0
    n_instances = 200
    for seed in range(n_instances):
        rng = np.random.default_rng([2024, seed])
        n, d = int(rng.integers(8, 65)), int(rng.integers(2, 17))
        A, B = random_pair(rng, n, d, dup_frac=0.2 if seed % 3 == 0 else 0.0, noise=float(rng.uniform(0.05, 2.0)))
        expect_ab, expect_ba = oracle_ranks(A, B), oracle_ranks(B, A)
        rank_ab, rank_ba, _ = pair_ranks(A, B, block=int(rng.integers(1, 64)))
        mismatches += int(np.sum(rank_ab != expect_ab) + np.sum(rank_ba != expect_ba))
        for i in rng.choice(n, size=2, replace=False):
            mismatches += int(matched_rank(int(i), A, B) != expect_ab[i])
        ks = (1, 5, 10)
        got = top_k_accuracy(A, B, ks)
        for k in ks:
            want = (np.mean(expect_ab <= k) + np.mean(expect_ba <= k)) / 2
            mismatches += int(got.topk_accuracy[k] != want)
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed < 10.0
    report_line(1, ok, f"{n_instances} random pairs, {mismatches} mismatches vs full enumeration, {elapsed:.2f} s (< 10 s)")
    assert ok


def test_2_pair_family_counts(report_line, tmp_path):
    m = synth_cohort(SynthSpec(13, 7, n_tiles=2, dim=2), tmp_path)
    counts = [len(enumerate_pairs(m, mode)) for mode in ALL_MODES]
    ok = counts == [273, 546, 3276] and sum(counts) == comb(91, 2)
    report_line(2, ok, f"pairs per family {counts}, total {sum(counts)} (expected 273/546/3276, 4095)")
    assert ok


def test_3_wilcoxon_fixture(report_line):
    start = time.perf_counter()
    table = load_scores_table(fixture_path())
    checks = [
        ("H0", "H0-mini", lambda p: 0.02 <= p <= 0.06, "in [0.02, 0.06]"),
        ("H0-mini", "UNI", lambda p: 0.02 <= p <= 0.07, "in [0.02, 0.07]"),
        ("H0-mini", "Phikon", lambda p: p < 1e-3, "< 1e-3"),
        ("Virchow2", "H0-mini", lambda p: p > 0.05, "> 0.05"),
    ]
    variants = {"BACH in (17 tasks)": (), "BACH out (16 tasks)": ("eva_bach",)}
    matched = []
    lines = []
    for name, exclude in variants.items():
        parts, all_ok = [], True
        for a, b, rule, desc in checks:
            r = wilcoxon_one_sided(paired_from_table(table, a, b, exclude))
            good = rule(r.p_value)
            all_ok &= good
            parts.append(f"{a}>{b} p={r.p_value:.4f} {desc} {'ok' if good else 'MISS'}")
        lines.append(f"    {name}: " + "; ".join(parts))
        if all_ok:
            matched.append(name)
    elapsed = time.perf_counter() - start
    ok = bool(matched) and elapsed < 1.0
    report_line(3, ok, f"pattern matched by: {', '.join(matched) or 'none'}; {elapsed:.3f} s (< 1 s)\n" + "\n".join(lines))
    assert ok


def test_4_monotone_synthetic_robustness(report_line, tmp_path):
    levels = [0.0, 1.0, 2.0, 4.0, 8.0]
    series = {(mode, metric): [] for mode in ALL_MODES for metric in ("mean_cosine", "top_k@10")}
    for i, f in enumerate(levels):
        spec = SynthSpec(4, 3, n_tiles=256, dim=32, staining_noise=0.2 * f, scanner_noise=0.1 * f, seed=7)
        report = run_benchmark(synth_cohort(spec, tmp_path / str(i)), ks=[10])
        for row in report.aggregates:
            series[(row.mode, row.metric)].append(row.median)
    monotone = all(all(b <= a for a, b in zip(v, v[1:])) for v in series.values())
    zero_ok = all(v[0] == 1.0 for v in series.values())
    ok = monotone and zero_ok
    detail = "; ".join(
        f"{mode.value} {metric}: " + " ".join(f"{x:.3f}" for x in series[(mode, metric)])
        for mode in ALL_MODES
        for metric in ("mean_cosine", "top_k@10")
    )
    report_line(4, ok, f"noise scale {levels}: non-increasing={monotone}, zero-noise 1.0/1.0={zero_ok}\n    {detail}")
    assert ok


def test_5_distillation_suite(report_line):
    start = time.perf_counter()
    checks = run_property_suite(seed=0)
    elapsed = time.perf_counter() - start
    required = [
        "logit shift invariance",
        "view-swap symmetry",
        "matched one-hot loss",
        "analytic gradient vs finite differences",
        "ln 2 closed-form cases",
    ]
    by_name = {c.name: c for c in checks}
    ok = all(by_name[n].passed for n in required) and elapsed < 5.0
    detail = "\n".join(f"    {'ok  ' if c.passed else 'MISS'} {c.name}: {c.detail}" for c in checks)
    report_line(5, ok, f"{sum(c.passed for c in checks)}/{len(checks)} properties, {elapsed:.2f} s (< 5 s)\n{detail}")
    assert ok


def _hest_task(rng):
    n_train, n_test, d, n_genes, n_factors = 500, 200, 512, 50, 32
    latent = rng.standard_normal((n_train + n_test, n_factors))
    X = latent @ rng.standard_normal((n_factors, d)) + 0.1 * rng.standard_normal((n_train + n_test, d))
    signal = latent @ rng.standard_normal((n_factors, n_genes))
    Y = signal + 0.1 * signal.std(axis=0) * rng.standard_normal(signal.shape)
    return LabeledFeatures(X[:n_train], Y[:n_train]), LabeledFeatures(X[n_train:], Y[n_train:])


def test_6_downstream_sanity(report_line):
    rng = np.random.default_rng(6)
    train, test = _hest_task(rng)
    hest = run_hest_protocol(train, test, q=256, alpha=1.0)

    d = 32
    labels = rng.permutation(np.arange(1400) % 2)
    slides = [SlideSample(rng.standard_normal((4, d)), int(y), f"blk{i}") for i, y in enumerate(labels)]
    shuffled = run_breastbm_protocol(slides[:400], {"site": slides[400:]})
    shuffled_auc = shuffled.auc["site"]

    pos = [SlideSample(rng.standard_normal((4, d)) + 0.5, 1, f"b{i}") for i in range(30)]
    neg = [SlideSample(rng.standard_normal((4, d)), 0, f"b{30 + i}") for i in range(30)]
    test_a = pos[:15] + neg[:15]
    same = run_breastbm_protocol(pos[15:] + neg[15:], {"a": test_a, "b": list(test_a)})
    ccc_same = same.ccc[("a", "b")]

    ok_hest = hest.mean_pearson >= 0.95
    ok_auc = 0.4 <= shuffled_auc <= 0.6
    ok_ccc = abs(ccc_same - 1.0) <= 1e-9
    ok = ok_hest and ok_auc and ok_ccc
    report_line(
        6,
        ok,
        f"HEST mean Pearson {hest.mean_pearson:.4f} (>= 0.95, q={hest.n_components}); "
        f"shuffled-label AUC {shuffled_auc:.3f} (in [0.4, 0.6]); identical-subcohort CCC {ccc_same!r} (1 within 1e-9)",
    )
    assert ok


def test_7_statistics_unit_values(report_line):
    adjusted, reject = holm_correction([0.01, 0.04, 0.03], 0.05)
    hmp = harmonic_mean_p([0.01, 1.0])
    w = wilcoxon_one_sided(PairedSamples.from_arrays([1.0, 2.0, 3.0, 4.0, 5.0], [0.0, 0.0, 0.0, 0.0, 0.0]))
    ok_holm = np.allclose(adjusted, [0.03, 0.06, 0.06], rtol=0, atol=1e-15) and reject == [True, False, False]
    ok_hmp = abs(hmp - 2 / 101) <= 1e-12
    ok_w = w.p_value == 0.03125 and w.method == "exact"
    ok = ok_holm and ok_hmp and ok_w
    report_line(7, ok, f"Holm {adjusted} reject {reject}; HMP {hmp!r} (2/101); Wilcoxon n=5 all positive p={w.p_value!r}")
    assert ok


_PLISM_PAIR_SCRIPT = textwrap.dedent(
    """
    import json, resource, time
    from concurrent.futures import ThreadPoolExecutor
    import numpy as np
    from threadpoolctl import threadpool_limits
    from pathrobust.robustness_metrics import top_k_accuracy

    n, d = 16278, 768
    rng = np.random.default_rng(8)
    A = rng.standard_normal((n, d), dtype=np.float32)
    B = (A + 0.8 * rng.standard_normal((n, d), dtype=np.float32)).astype(np.float32)
    top_k_accuracy(A[:300], B[:300], [10])  # compile kernels outside the timing
    start = time.perf_counter()
    with ThreadPoolExecutor(8) as pool, threadpool_limits(1, user_api="blas"):
        m = top_k_accuracy(A, B, [10], executor=pool)
    elapsed = time.perf_counter() - start
    rss = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024
    print(json.dumps({"seconds": elapsed, "max_rss": rss, "top10": m.topk_accuracy[10]}))
    """
)


@pytest.mark.slow
def test_8_performance(report_line, tmp_path):
    proc = subprocess.run([sys.executable, "-c", _PLISM_PAIR_SCRIPT], capture_output=True, text=True, check=True)
    pair = json.loads(proc.stdout.strip().splitlines()[-1])
    ok_pair = pair["seconds"] < 60.0 and pair["max_rss"] < 2 * 2**30

    cohort = synth_cohort(SynthSpec(13, 7, n_tiles=1024, dim=768, seed=8), tmp_path / "full")
    start = time.perf_counter()
    full = run_benchmark(cohort, ks=[1, 5, 10], workers=8, max_resident_slides=91)
    full_seconds = time.perf_counter() - start
    n_pairs = sum(len(v) for v in full.pairs.values())
    ok_full = full_seconds < 300.0 and n_pairs == 4095

    small = synth_cohort(SynthSpec(13, 7, n_tiles=128, dim=64, seed=8), tmp_path / "small")
    outputs = {}
    for workers in (1, 3, 8):
        emit_report(run_benchmark(small, workers=workers, max_resident_slides=8), tmp_path / f"w{workers}")
        outputs[workers] = [(tmp_path / f"w{workers}" / f).read_bytes() for f in (PAIRS_FILE, AGGREGATE_FILE, TABLE_FILE)]
    ok_bytes = outputs[1] == outputs[3] == outputs[8]

    ok = ok_pair and ok_full and ok_bytes
    report_line(
        8,
        ok,
        f"PLISM-scale pair N=16278 d=768 k=10, 8 workers: {pair['seconds']:.1f} s (< 60 s), "
        f"peak RSS {pair['max_rss'] / 2**30:.2f} GiB (< 2 GiB); "
        f"91-slide N=1024 cohort, {n_pairs} pairs: {full_seconds:.1f} s (< 300 s); "
        f"reports byte-identical for 1/3/8 workers: {ok_bytes}",
    )
    assert ok
