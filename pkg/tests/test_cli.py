import csv
import re

import numpy as np
import pytest

from pathrobust.cli import run_cli
from pathrobust.embedding_store import EmbeddingMatrix, write_embedding_file


@pytest.fixture
def cohort_dir(tmp_path):
    out = tmp_path / "cohort"
    assert run_cli(["synth", "--out", str(out), "--stainings", "3", "--scanners", "2", "--tiles", "24", "--dim", "6"]) == 0
    return out


class TestExitCodes:
    def test_unknown_flag(self, capsys):
        assert run_cli(["run", "--bogus"]) == 1
        assert "usage" in capsys.readouterr().err

    def test_unknown_subcommand(self):
        assert run_cli(["fly"]) == 1

    def test_missing_manifest_is_io_error(self, tmp_path, capsys):
        path = tmp_path / "missing.jsonl"
        assert run_cli(["run", "--manifest", str(path), "--out", str(tmp_path / "r")]) == 2
        assert str(path) in capsys.readouterr().err

    def test_malformed_manifest_is_validation_error(self, tmp_path):
        (tmp_path / "m.jsonl").write_text("{oops\n")
        assert run_cli(["run", "--manifest", str(tmp_path / "m.jsonl"), "--out", str(tmp_path / "r")]) == 1

    def test_corrupt_slide(self, cohort_dir, tmp_path):
        path = next((cohort_dir / "slides").glob("*.peb"))
        path.write_bytes(path.read_bytes()[:-4])
        assert run_cli(["run", "--manifest", str(cohort_dir / "manifest.jsonl"), "--out", str(tmp_path / "r")]) == 1

    def test_help(self):
        assert run_cli(["--help"]) == 0


class TestRun:
    def test_happy_path(self, cohort_dir, tmp_path):
        out = tmp_path / "r"
        assert run_cli(["run", "--manifest", str(cohort_dir / "manifest.jsonl"), "--k", "10", "--out", str(out)]) == 0
        assert (out / "pairs.csv").exists() and (out / "aggregate.csv").exists()
        assert (out / "pairs.csv").read_text().splitlines()[0].endswith("top10")

    def test_threads_do_not_change_results(self, cohort_dir, tmp_path, monkeypatch):
        m = str(cohort_dir / "manifest.jsonl")
        assert run_cli(["run", "--manifest", m, "--out", str(tmp_path / "a"), "--threads", "1"]) == 0
        monkeypatch.setenv("PATHROBUST_THREADS", "6")
        assert run_cli(["run", "--manifest", m, "--out", str(tmp_path / "b")]) == 0
        for name in ("pairs.csv", "aggregate.csv", "report.md"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_modes_flag(self, cohort_dir, tmp_path):
        out = tmp_path / "r"
        m = str(cohort_dir / "manifest.jsonl")
        assert run_cli(["run", "--manifest", m, "--out", str(out), "--modes", "cross_scanner"]) == 0
        modes = {row["mode"] for row in csv.DictReader(open(out / "aggregate.csv"))}
        assert modes == {"fixed_staining_cross_scanner"}
        assert run_cli(["run", "--manifest", m, "--out", str(out), "--modes", "nonsense"]) == 1

    def test_report_subcommand(self, cohort_dir, tmp_path):
        m = str(cohort_dir / "manifest.jsonl")
        run_cli(["run", "--manifest", m, "--out", str(tmp_path / "r")])
        assert run_cli(["report", "--pairs", str(tmp_path / "r" / "pairs.csv"), "--out", str(tmp_path / "rr")]) == 0
        assert (tmp_path / "rr" / "aggregate.csv").read_bytes() == (tmp_path / "r" / "aggregate.csv").read_bytes()


class TestOtherCommands:
    def test_stats_fixture_line(self, capsys):
        assert run_cli(["stats", "--compare", "H0:H0-mini"]) == 0
        line = capsys.readouterr().out.strip()
        p = float(re.search(r" p=([0-9.e-]+)", line).group(1))
        assert line.startswith("H0 > H0-mini") and 0.02 <= p <= 0.06

    def test_stats_bad_comparison(self):
        assert run_cli(["stats", "--compare", "H0"]) == 1
        assert run_cli(["stats", "--compare", "H0:Unknown"]) == 1

    def test_stats_writes_csv(self, tmp_path):
        assert run_cli(["stats", "--compare", "UNI:Phikon", "--compare", "H0:UNI", "--out", str(tmp_path)]) == 0
        rows = list(csv.DictReader(open(tmp_path / "comparisons.csv")))
        assert [r["model_a"] for r in rows] == ["UNI", "H0"]

    def test_distill_check(self, capsys):
        assert run_cli(["distill-check", "--seed", "3"]) == 0
        out = capsys.readouterr().out
        assert out.count("PASS") == 9 and "FAIL" not in out

    def test_downstream(self, tmp_path):
        rng = np.random.default_rng(0)
        lines = ["slide_id,group_id,endpoint,value"]
        train, test = [], []
        for i in range(40):
            label = i % 2
            path = tmp_path / f"tr{i}.peb"
            write_embedding_file(EmbeddingMatrix.from_array(rng.standard_normal((8, 4)) + label), path)
            train.append(f'{{"slide_id": "tr{i}", "staining": "h", "scanner": "s", "path": "{path.name}", "n_tiles": 8, "dim": 4}}')
            lines.append(f"tr{i},tg{i},er,{label}")
        for sub in ("a", "b"):
            for i in range(10):
                label = i % 2
                path = tmp_path / f"{sub}{i}.peb"
                write_embedding_file(EmbeddingMatrix.from_array(rng.standard_normal((8, 4)) + label), path)
                test.append(f'{{"slide_id": "{sub}{i}", "staining": "{sub}", "scanner": "s", "path": "{path.name}", "n_tiles": 8, "dim": 4}}')
                lines.append(f"{sub}{i},blk{i},er,{label}")
        (tmp_path / "train.jsonl").write_text("\n".join(train) + "\n")
        (tmp_path / "test.jsonl").write_text("\n".join(test) + "\n")
        (tmp_path / "labels.csv").write_text("\n".join(lines) + "\n")
        code = run_cli([
            "downstream", "--manifest", str(tmp_path / "test.jsonl"), "--train-manifest", str(tmp_path / "train.jsonl"),
            "--labels", str(tmp_path / "labels.csv"), "--endpoint", "er", "--out", str(tmp_path / "o"),
        ])
        assert code == 0
        aucs = list(csv.DictReader(open(tmp_path / "o" / "auc.csv")))
        assert [r["subcohort"] for r in aucs] == ["a/s", "b/s"]
        assert all(float(r["auc"]) > 0.5 for r in aucs)
        (row,) = csv.DictReader(open(tmp_path / "o" / "ccc.csv"))
        assert row["n_shared"] == "10"
