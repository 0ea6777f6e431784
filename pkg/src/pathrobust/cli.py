"""Command-line entry point.

Exit codes: 0 success, 1 validation / usage error, 2 I/O error.

Flags can also be set through environment variables named
``PATHROBUST_<FLAG>`` (upper case, dashes as underscores), e.g.
``PATHROBUST_THREADS=8`` or ``PATHROBUST_MAX_RESIDENT_SLIDES=32``.
Command-line values take precedence.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import warnings
from pathlib import Path
from typing import Optional, Sequence


from . import __version__
from .benchmark_runner import ALL_MODES, PairMode, run_benchmark
from .distillation_losses import run_property_suite
from .downstream_eval import SlideSample, run_breastbm_protocol
from .embedding_store import load_manifest, load_slide_records, read_embedding_file
from .exceptions import ValidationError
from .reporting import AGGREGATE_FILE, TABLE_FILE, aggregate_csv, emit_report, read_pairs_file, table_markdown
from .stats import compare_models, fixture_path, load_scores_table
from .synth import SynthSpec, synth_cohort

ENV_PREFIX = "PATHROBUST_"
EXIT_OK, EXIT_VALIDATION, EXIT_IO = 0, 1, 2



class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


def _env(name: str, default=None, cast=str):
    raw = os.environ.get(ENV_PREFIX + name.upper().replace("-", "_"))
    if raw is None:
        return default
    try:
        return cast(raw)
    except ValueError:
        raise _UsageError(f"invalid value {raw!r} for {ENV_PREFIX}{name.upper().replace('-', '_')}") from None


def _common(p: argparse.ArgumentParser, *, out_required: bool = False) -> None:
    out_default = _env("out")
    p.add_argument("--out", type=Path, default=out_default, required=out_required and out_default is None,
                   help="output directory")
    p.add_argument("--threads", type=int, default=_env("threads", 1, int), help="worker threads (results do not depend on it)")
    p.add_argument("--seed", type=int, default=_env("seed", 0, int), help="seed for all randomness")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pathrobust", description="Robustness benchmark for pathology tile embeddings.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="compute pair metrics for a cohort and write reports")
    manifest_default = _env("manifest")
    run.add_argument("--manifest", type=Path, default=manifest_default, required=manifest_default is None)
    run.add_argument("--k", type=int, action="append", dest="ks", help="top-k cutoff (repeatable; default 1, 5, 10)")
    run.add_argument("--modes", default=_env("modes"), help="comma-separated pair families (default: all three)")
    run.add_argument("--max-resident-slides", type=int, default=_env("max_resident_slides", 16, int))
    run.add_argument("--label", default="model", help="row label in report.md")
    _common(run, out_required=True)

    synth = sub.add_parser("synth", help="generate a synthetic staining x scanner cohort")
    synth.add_argument("--stainings", type=int, default=13)
    synth.add_argument("--scanners", type=int, default=7)
    synth.add_argument("--tiles", type=int, default=256)
    synth.add_argument("--dim", type=int, default=32)
    synth.add_argument("--staining-noise", type=float, default=0.2)
    synth.add_argument("--scanner-noise", type=float, default=0.1)
    _common(synth, out_required=True)

    st = sub.add_parser("stats", help="one-sided Wilcoxon comparisons with Holm correction")
    st.add_argument("--scores", type=Path, default=None, help="CSV with model,task,score (default: bundled EVA+HEST table)")
    st.add_argument("--compare", action="append", required=True, metavar="A:B",
                    help="test 'A better than B' (repeatable; Holm is applied over all given)")
    st.add_argument("--alpha", type=float, default=0.05)
    st.add_argument("--exclude-task", action="append", default=[], metavar="TASK")
    _common(st)

    ds = sub.add_parser("downstream", help="mean-pool + logistic regression: AUC per subcohort, CCC per subcohort pair")
    ds.add_argument("--manifest", type=Path, required=True, help="test slides; subcohort = staining/scanner")
    ds.add_argument("--train-manifest", type=Path, required=True)
    ds.add_argument("--labels", type=Path, required=True, help="CSV with slide_id,group_id,endpoint,value")
    ds.add_argument("--endpoint", required=True)
    ds.add_argument("--l2", type=float, default=1e-2)
    ds.add_argument("--no-standardize", action="store_true")
    _common(ds)

    dc = sub.add_parser("distill-check", help="run the distillation-loss property suite")
    _common(dc)

    rep = sub.add_parser("report", help="re-aggregate a persisted pairs.csv")
    rep.add_argument("--pairs", type=Path, required=True)
    rep.add_argument("--label", default="model")
    _common(rep)
    return parser


def _cmd_run(args) -> int:
    manifest = load_manifest(args.manifest)
    ks = sorted(set(args.ks)) if args.ks else [1, 5, 10]
    modes = ALL_MODES if not args.modes else tuple(PairMode.parse(m) for m in args.modes.split(",") if m.strip())
    if args.threads < 1:
        raise ValidationError("--threads must be >= 1")
    report = run_benchmark(manifest, ks, modes, args.threads, max_resident_slides=args.max_resident_slides)
    files = emit_report(report, args.out, label=args.label)
    print(table_markdown(report, args.label), end="")
    print(f"wrote {', '.join(str(p) for p in files.values())}")
    return EXIT_OK


def _cmd_synth(args) -> int:
    spec = SynthSpec(args.stainings, args.scanners, args.tiles, args.dim, args.staining_noise, args.scanner_noise, args.seed)
    manifest = synth_cohort(spec, args.out)
    print(f"wrote {len(manifest)} slides and {Path(args.out) / 'manifest.jsonl'}")
    return EXIT_OK


def _parse_comparison(text: str) -> tuple[str, str]:
    a, sep, b = text.partition(":")
    if not sep or not a or not b:
        raise ValidationError(f"comparison must look like MODEL_A:MODEL_B, got {text!r}")
    return a, b


def _cmd_stats(args) -> int:
    table = load_scores_table(args.scores or fixture_path())
    comps = [_parse_comparison(c) for c in args.compare]
    results = compare_models(table, comps, args.alpha, args.exclude_task)
    rows = []
    for c in results:
        r = c.result
        print(
            f"{c.model_a} > {c.model_b}: n={r.n_effective} W+={r.statistic:g} "
            f"p={r.p_value:.4g} ({r.method}) holm_p={c.adjusted_p:.4g} reject={'yes' if c.reject else 'no'}"
        )
        rows.append([c.model_a, c.model_b, r.n_effective, r.statistic, repr(r.p_value), r.method, repr(c.adjusted_p), int(c.reject)])
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        with open(Path(args.out) / "comparisons.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["model_a", "model_b", "n_effective", "w_plus", "p_value", "method", "holm_p", "reject"])
            w.writerows(rows)
    return EXIT_OK


def _read_labels(path: Path, endpoint: str) -> dict:
    labels = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"slide_id", "group_id", "endpoint", "value"}
        if not need <= set(reader.fieldnames or []):
            raise ValidationError(f"{path}: columns {sorted(need)} required")
        for lineno, row in enumerate(reader, start=2):
            if row["endpoint"] != endpoint:
                continue
            try:
                value = int(float(row["value"]))
            except ValueError:
                raise ValidationError(f"{path}:{lineno}: bad label {row['value']!r}") from None
            labels[row["slide_id"]] = (row["group_id"], value)
    if not labels:
        raise ValidationError(f"{path}: no labels for endpoint {endpoint!r}")
    return labels


def _samples(records, labels):
    out = {}
    for rec in records:
        if rec.slide_id not in labels:
            continue
        group, value = labels[rec.slide_id]
        tiles = read_embedding_file(rec.path).values
        if tiles.shape != (rec.n_tiles, rec.dim):
            raise ValidationError(
                f"slide {rec.slide_id!r}: file holds {tiles.shape[0]}x{tiles.shape[1]}, "
                f"manifest declares {rec.n_tiles}x{rec.dim}"
            )
        out.setdefault(f"{rec.staining_id}/{rec.scanner_id}", []).append(SlideSample(tiles, value, group))
    return out


def _cmd_downstream(args) -> int:
    labels = _read_labels(args.labels, args.endpoint)
    train = [s for group in _samples(load_slide_records(args.train_manifest), labels).values() for s in group]
    if not train:
        raise ValidationError("no labelled training slides")
    test = _samples(load_slide_records(args.manifest), labels)
    res = run_breastbm_protocol(train, test, l2=args.l2, standardize=not args.no_standardize)
    auc_rows = [[name, len(test[name]), "" if v is None else repr(v)] for name, v in res.auc.items()]
    ccc_rows = [[a, b, res.n_shared[(a, b)], repr(v)] for (a, b), v in res.ccc.items()]
    print(f"endpoint {args.endpoint}: {len(train)} training slides")
    for name, n, v in auc_rows:
        print(f"AUC {name} (n={n}): {float(v):.3f}" if v else f"AUC {name} (n={n}): undefined")
    for a, b, n, v in ccc_rows:
        print(f"CCC {a} vs {b} (shared blocks={n}): {float(v):.3f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for name, header, rows in (
            ("auc.csv", ["subcohort", "n_slides", "auc"], auc_rows),
            ("ccc.csv", ["subcohort_a", "subcohort_b", "n_shared", "ccc"], ccc_rows),
        ):
            with open(out / name, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(header)
                w.writerows(rows)
    return EXIT_OK


def _cmd_distill_check(args) -> int:
    checks = run_property_suite(args.seed)
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name}: {c.detail}")
    return EXIT_OK if all(c.passed for c in checks) else EXIT_VALIDATION


def _cmd_report(args) -> int:
    report = read_pairs_file(args.pairs)
    text = table_markdown(report, args.label)
    print(text, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / AGGREGATE_FILE).write_text(aggregate_csv(report.aggregates))
        (out / TABLE_FILE).write_text(text)
    return EXIT_OK


_COMMANDS = {
    "run": _cmd_run,
    "synth": _cmd_synth,
    "stats": _cmd_stats,
    "downstream": _cmd_downstream,
    "distill-check": _cmd_distill_check,
    "report": _cmd_report,
}


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_VALIDATION
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return _COMMANDS[args.command](args)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_VALIDATION
    except (ValidationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
