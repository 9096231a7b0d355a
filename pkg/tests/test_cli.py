from __future__ import annotations

import csv
import json
import logging
from pathlib import Path
from typing import TYPE_CHECKING

import pytest

from loopsim.cli import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, build_parser, main
from loopsim.manifest import manifest_path
from loopsim.movielens_api import DownloadError
from loopsim.recommender import load_checkpoint

if TYPE_CHECKING:
    from pytest import CaptureFixture, LogCaptureFixture, MonkeyPatch

FAST_SETTINGS = (
    "alpha=0.01\n"
    "k=3\n"
    "epochs=5\n"
    "poisson_k=3\n"
    "poisson_iters=5\n"
    "exposure_model=popularity\n"
    "iterations=5\n"
    "replicas=3\n"
    "slate_size=3\n"
    "train_fraction=0.5\n"
)


@pytest.fixture
def settings(tmp_path: Path) -> Path:
    path = tmp_path / "loopsim.conf"
    path.write_text(FAST_SETTINGS, encoding="utf-8")
    return path


def _rows(path: Path) -> list[list[str]]:
    with path.open(encoding="utf-8", newline="") as fh:
        return list(csv.reader(fh))


def _complete(movielens_file: Path, settings: Path, out: Path) -> int:
    return main(
        ["--config", str(settings), "complete", "--dataset", str(movielens_file), "--out", str(out)]
    )


def test_parser_requires_command(capsys: CaptureFixture[str]) -> None:
    assert main([]) == EXIT_USAGE
    assert "command" in capsys.readouterr().err


def test_parser_defaults() -> None:
    args = build_parser().parse_args(
        ["simulate", "--dataset", "u.data", "--complete", "c.bin", "--out", "t.csv"]
    )
    assert args.variants == "mf,pear_mf,propensity_mf,mab_mf,mab_pear_mf"
    assert args.fmt == "tab_100k"
    assert args.threads is None


def test_complete_writes_dense_matrix(movielens_file: Path, settings: Path, tmp_path: Path) -> None:
    out = tmp_path / "complete.bin"
    assert _complete(movielens_file, settings, out) == EXIT_OK
    assert out.stat().st_size == 16 + 4 * 12 * 15

    manifest = json.loads(manifest_path(out).read_text(encoding="utf-8"))
    assert manifest["command"] == "complete"
    assert manifest["config"]["seed"] == 42
    assert str(movielens_file) in manifest["inputs"]

    again = tmp_path / "again.bin"
    assert _complete(movielens_file, settings, again) == EXIT_OK
    assert again.read_bytes() == out.read_bytes()


def test_missing_dataset_is_usage_error(tmp_path: Path, capsys: CaptureFixture[str]) -> None:
    missing = tmp_path / "nope" / "u.data"
    code = main(["complete", "--dataset", str(missing), "--out", str(tmp_path / "c.bin")])
    assert code == EXIT_USAGE
    assert str(missing) in capsys.readouterr().err


def test_malformed_dataset_is_usage_error(tmp_path: Path, capsys: CaptureFixture[str]) -> None:
    bad = tmp_path / "u.data"
    bad.write_text("1\t1\tfive\t1\n", encoding="utf-8")
    code = main(["complete", "--dataset", str(bad), "--out", str(tmp_path / "c.bin")])
    assert code == EXIT_USAGE
    assert ":1:" in capsys.readouterr().err


def test_eval_exposure_rows(movielens_file: Path, settings: Path, tmp_path: Path) -> None:
    out = tmp_path / "auc.csv"
    code = main(
        [
            "--config",
            str(settings),
            "eval-exposure",
            "--dataset",
            str(movielens_file),
            "--batches",
            "4",
            "--models",
            "popularity,random",
            "--out",
            str(out),
        ]
    )
    assert code == EXIT_OK
    rows = _rows(out)
    assert rows[0] == ["model", "repeat", "window", "auc", "mean", "ci95"]
    assert len(rows) == 1 + 2 * 3 + 2
    aggregates = [r for r in rows[1:] if r[2] == "all"]
    assert [r[0] for r in aggregates] == ["popularity", "random"]
    for row in rows[1:]:
        if row[2] != "all":
            assert 0.0 <= float(row[3]) <= 1.0
    assert manifest_path(out).exists()

    ttest = _rows(tmp_path / "auc_ttest.csv")
    assert ttest[0] == [
        "model_a",
        "model_b",
        "auc_mean_a",
        "auc_mean_b",
        "t_statistic",
        "p_value",
    ]
    assert [row[:2] for row in ttest[1:]] == [["popularity", "random"]]
    assert manifest_path(tmp_path / "auc_ttest.csv").exists()


def test_eval_exposure_usage_errors(
    movielens_file: Path, tmp_path: Path, capsys: CaptureFixture[str]
) -> None:
    out = str(tmp_path / "auc.csv")
    base = ["eval-exposure", "--dataset", str(movielens_file), "--out", out]
    assert main(base + ["--batches", "1"]) == EXIT_USAGE
    assert "--batches" in capsys.readouterr().err
    assert main(base + ["--models", "popularity,bayes"]) == EXIT_USAGE
    assert "poisson" in capsys.readouterr().err


def test_simulate_outputs(movielens_file: Path, settings: Path, tmp_path: Path) -> None:
    complete = tmp_path / "complete.bin"
    assert _complete(movielens_file, settings, complete) == EXIT_OK

    def run(out: Path) -> int:
        return main(
            [
                "--config",
                str(settings),
                "--threads",
                "2",
                "simulate",
                "--dataset",
                str(movielens_file),
                "--complete",
                str(complete),
                "--variants",
                "mf,pear_mf",
                "--out",
                str(out),
            ]
        )

    out = tmp_path / "trace.csv"
    assert run(out) == EXIT_OK
    detail = _rows(out)
    assert detail[0] == [
        "variant",
        "replica",
        "iteration",
        "epc",
        "epd",
        "gini",
        "hit_rate",
        "train_size",
    ]
    assert len(detail) == 1 + 2 * 3 * 5

    aggregate = _rows(tmp_path / "trace_aggregate.csv")
    assert aggregate[0] == ["variant", "iteration", "metric", "mean", "ci95_halfwidth"]
    assert len(aggregate) == 1 + 2 * 5 * 4
    ttest = _rows(tmp_path / "trace_ttest.csv")
    assert ttest[0][:5] == ["variant_a", "variant_b", "iteration", "metric", "t_statistic"]
    assert len(ttest) == 1 + 5 * 4

    for name in ("trace.csv", "trace_aggregate.csv", "trace_ttest.csv"):
        manifest = json.loads(manifest_path(tmp_path / name).read_text(encoding="utf-8"))
        assert manifest["seeds"]["master_seed"] == 42
        assert len(manifest["seeds"]["replica_seeds"]) == 3
        assert "per-slot" in manifest["notes"]["mab_scheme"]

    rerun = tmp_path / "rerun.csv"
    assert run(rerun) == EXIT_OK
    assert rerun.read_bytes() == out.read_bytes()
    assert (tmp_path / "rerun_aggregate.csv").read_bytes() == (
        tmp_path / "trace_aggregate.csv"
    ).read_bytes()


def test_simulate_output_does_not_depend_on_threads(
    movielens_file: Path, settings: Path, tmp_path: Path
) -> None:
    complete = tmp_path / "complete.bin"
    assert _complete(movielens_file, settings, complete) == EXIT_OK

    for threads in ("1", "8"):
        out = tmp_path / f"trace{threads}.csv"
        code = main(
            [
                "--config",
                str(settings),
                "--threads",
                threads,
                "simulate",
                "--dataset",
                str(movielens_file),
                "--complete",
                str(complete),
                "--variants",
                "mf,mab_pear_mf",
                "--out",
                str(out),
            ]
        )
        assert code == EXIT_OK

    for suffix in ("", "_aggregate", "_ttest"):
        single = tmp_path / f"trace1{suffix}.csv"
        pooled = tmp_path / f"trace8{suffix}.csv"
        assert single.read_bytes() == pooled.read_bytes()


def test_simulate_rejects_unknown_variant(
    movielens_file: Path, settings: Path, tmp_path: Path, capsys: CaptureFixture[str]
) -> None:
    complete = tmp_path / "complete.bin"
    assert _complete(movielens_file, settings, complete) == EXIT_OK
    capsys.readouterr()
    code = main(
        [
            "simulate",
            "--dataset",
            str(movielens_file),
            "--complete",
            str(complete),
            "--variants",
            "mf,ucb_mf",
            "--out",
            str(tmp_path / "t.csv"),
        ]
    )
    assert code == EXIT_USAGE
    err = capsys.readouterr().err
    assert "ucb_mf" in err
    assert "mab_pear_mf" in err


def test_simulate_rejects_mismatched_complete(
    movielens_file: Path, settings: Path, tmp_path: Path
) -> None:
    from tests.conftest import synthetic_lines, write_movielens

    other = write_movielens(tmp_path / "small.data", synthetic_lines(n_users=4, n_items=5))
    complete = tmp_path / "complete.bin"
    assert _complete(other, settings, complete) == EXIT_OK
    code = main(
        [
            "simulate",
            "--dataset",
            str(movielens_file),
            "--complete",
            str(complete),
            "--out",
            str(tmp_path / "t.csv"),
        ]
    )
    assert code == EXIT_USAGE


@pytest.mark.parametrize("variant", ["mf", "pear_mf"])
def test_train_writes_checkpoint(
    movielens_file: Path, settings: Path, tmp_path: Path, variant: str
) -> None:
    out = tmp_path / f"{variant}.pear"
    code = main(
        [
            "--config",
            str(settings),
            "train",
            "--dataset",
            str(movielens_file),
            "--variant",
            variant,
            "--out",
            str(out),
        ]
    )
    assert code == EXIT_OK
    model = load_checkpoint(out)
    assert (model.n_users, model.n_items, model.k) == (12, 15, 3)
    if variant == "mf":
        assert not model.user_jsd.any()
    assert manifest_path(out).exists()


def test_fetch_failure_is_runtime_error(
    monkeypatch: MonkeyPatch, tmp_path: Path, capsys: CaptureFixture[str]
) -> None:
    def broken(fmt: str, dest: Path, *, timeout: float) -> Path:
        raise DownloadError("cannot download ml-100k.zip")

    monkeypatch.setattr("loopsim.cli.fetch_movielens", broken)
    assert main(["fetch", "--dest", str(tmp_path)]) == EXIT_FAILURE
    assert "ml-100k.zip" in capsys.readouterr().err


def test_profile_flag_logs_summary(
    movielens_file: Path, settings: Path, tmp_path: Path, caplog: LogCaptureFixture
) -> None:
    with caplog.at_level(logging.INFO, logger="loopsim"):
        code = main(
            [
                "--config",
                str(settings),
                "--profile",
                "train",
                "--dataset",
                str(movielens_file),
                "--variant",
                "mf",
                "--out",
                str(tmp_path / "m.pear"),
            ]
        )
    assert code == EXIT_OK
    assert "profiling_summary recommender.train count=1" in caplog.text
