"""Report files for robustness runs.

``emit_report`` writes into one directory:

* ``pairs.csv``      one row per slide pair: mode, slide_a, slide_b,
                     mean_cosine, top<k>...
* ``aggregate.csv``  one row per mode x metric: median, IQR, pair count and
                     the "median (IQR)" cell
* ``report.md``      the three pair families side by side (cosine, top-10)
* ``run.json``       run parameters, including the wall-clock timestamp and
                     worker count

The first three files depend only on the manifest contents and ``ks`` and
are byte-identical across runs; ``run.json`` is not.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from pathlib import Path

from .benchmark_runner import (
    ALL_MODES,
    AggregateRow,
    PairMode,
    RobustnessReport,
    aggregate_pairs,
)
from .exceptions import ValidationError
from .robustness_metrics import SlidePairMetrics

log = logging.getLogger(__name__)

PAIRS_FILE = "pairs.csv"
AGGREGATE_FILE = "aggregate.csv"
TABLE_FILE = "report.md"
RUN_FILE = "run.json"


def format_cell(median: float, iqr: float) -> str:
    return f"{median:.2f} ({iqr:.2f})"


def _num(x: float) -> str:
    return repr(float(x))


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def pairs_csv(report: RobustnessReport) -> str:
    header = ["mode", "slide_a", "slide_b", "mean_cosine"] + [f"top{k}" for k in report.ks]
    rows = [
        [mode.value, m.slide_a, m.slide_b, _num(m.mean_cosine)] + [_num(m.topk_accuracy[k]) for k in report.ks]
        for mode, m in report.all_pairs()
    ]
    return _csv_text(header, rows)


def aggregate_csv(rows: list[AggregateRow]) -> str:
    return _csv_text(
        ["mode", "metric", "median", "iqr", "n_pairs", "cell"],
        [[r.mode.value, r.metric, _num(r.median), _num(r.iqr), r.n_pairs, format_cell(r.median, r.iqr)] for r in rows],
    )


def table_k(ks) -> int:
    return 10 if 10 in ks else max(ks)


def table_markdown(report: RobustnessReport, label: str = "model") -> str:
    k = table_k(report.ks)
    by_key = {(r.mode, r.metric): r for r in report.aggregates}
    header = ["Model"]
    cells = [label]
    warnings = []
    for mode in ALL_MODES:
        header += [f"{mode.title}: cosine", f"{mode.title}: top-{k}"]
        cos = by_key.get((mode, "mean_cosine"))
        top = by_key.get((mode, f"top_k@{k}"))
        if cos is None or top is None:
            cells += ["n/a", "n/a"]
            reason = "not requested" if mode not in report.modes else "no slide pairs"
            warnings.append(f"warning: {mode.value}: {reason}; row omitted from {AGGREGATE_FILE}")
        else:
            cells += [format_cell(cos.median, cos.iqr), format_cell(top.median, top.iqr)]
    n_pairs = {mode: len(report.pairs.get(mode, [])) for mode in ALL_MODES}
    lines = [
        "# Robustness report",
        "",
        "Median (IQR) over slide pairs.",
        "",
        "| " + " | ".join(header) + " |",
        "|" + "|".join("---" for _ in header) + "|",
        "| " + " | ".join(cells) + " |",
        "",
        "Pairs per family: " + ", ".join(f"{m.value}={n_pairs[m]}" for m in ALL_MODES),
        f"Tiles per slide: {report.n_tiles}",
        f"Manifest sha256: {report.manifest_digest}",
    ]
    if warnings:
        lines.append("")
        lines.extend(warnings)
    return "\n".join(lines) + "\n"


def emit_report(report: RobustnessReport, out_dir, label: str = "model") -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for mode in ALL_MODES:
        if mode in report.modes and not report.pairs.get(mode):
            log.warning("no slide pairs for %s; row omitted", mode.value)
    files = {
        PAIRS_FILE: pairs_csv(report),
        AGGREGATE_FILE: aggregate_csv(report.aggregates),
        TABLE_FILE: table_markdown(report, label),
        RUN_FILE: json.dumps(
            {
                "manifest_sha256": report.manifest_digest,
                "ks": list(report.ks),
                "modes": [m.value for m in report.modes],
                "workers": report.workers,
                "timestamp": report.timestamp,
                "n_tiles": report.n_tiles,
            },
            indent=2,
        )
        + "\n",
    }
    for name, text in files.items():
        (out_dir / name).write_text(text)
    return {name: out_dir / name for name in files}


def read_pairs_file(path) -> RobustnessReport:
    """Rebuild a report (bidirectional values only) from a persisted ``pairs.csv``."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path}: empty pairs file") from None
        if header[:4] != ["mode", "slide_a", "slide_b", "mean_cosine"]:
            raise ValidationError(f"{path}: unexpected header {header}")
        try:
            ks = tuple(int(h[3:]) for h in header[4:])
        except ValueError:
            raise ValidationError(f"{path}: bad top-k column in {header}") from None
        pairs: dict = {}
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ValidationError(f"{path}:{lineno}: expected {len(header)} fields")
            try:
                mode = PairMode(row[0])
                vals = [float(v) for v in row[3:]]
            except ValueError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
            pairs.setdefault(mode, []).append(
                SlidePairMetrics(
                    slide_a=row[1],
                    slide_b=row[2],
                    mean_cosine=vals[0],
                    topk_accuracy=dict(zip(ks, vals[1:])),
                    directed_a_to_b={},
                    directed_b_to_a={},
                    n_tiles=0,
                )
            )
    modes = tuple(m for m in ALL_MODES if m in pairs)
    return RobustnessReport(
        manifest_digest="",
        ks=ks,
        modes=modes,
        pairs=pairs,
        aggregates=aggregate_pairs(pairs, ks),
    )


def read_aggregate_file(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
