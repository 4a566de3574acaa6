from __future__ import annotations

import json
from typing import TYPE_CHECKING

import pandas as pd
import pytest

from main import ERROR_EXIT, main
from src.config import USAGE_ERROR_EXIT
from src.distill.trainer import CHECKPOINT_FILE, STATS_FILE
from src.experiments.runner import RESULT_COLUMNS, RESULTS_FILE

if TYPE_CHECKING:
    from pathlib import Path

WRN_22X2 = ["--arch", "wrn", "--depth", "22", "--widen", "2"]


def _exit_code(argv: list[str]) -> int | str | None:
    with pytest.raises(SystemExit) as excinfo:
        main(argv)
    return excinfo.value.code


# ANALYZE TESTS
# =============
def test_analyze_json(capsys: pytest.CaptureFixture[str]) -> None:
    main(["analyze", *WRN_22X2, "--policy", "g=2", "--format", "json"])

    report = json.loads(capsys.readouterr().out)
    assert report["totals"] == {"params": 656020, "flops": 93647360}
    assert report["input"] == [3, 32, 32]


def test_analyze_non_residual(capsys: pytest.CaptureFixture[str]) -> None:
    main(["analyze", *WRN_22X2, "--policy", "g2", "--residual", "false", "--format", "json"])

    assert json.loads(capsys.readouterr().out)["totals"]["flops"] == 92074496


def test_analyze_csv_lists_layers(capsys: pytest.CaptureFixture[str]) -> None:
    main(["analyze", *WRN_22X2, "--format", "csv"])

    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "id,kind,params,flops,fmap,shortcut"
    assert lines[1].startswith("stem.conv,")


def test_analyze_sweep(capsys: pytest.CaptureFixture[str]) -> None:
    main(["analyze", *WRN_22X2, "--sweep"])

    out = capsys.readouterr().out
    assert "93.65" in out
    assert "92.07" in out
    assert out.startswith("FLOPs (M)")


# ERROR TESTS
# ===========
def test_usage_error(capsys: pytest.CaptureFixture[str]) -> None:
    assert _exit_code(["analyze", *WRN_22X2, "--input", "3x32"]) == USAGE_ERROR_EXIT

    line = capsys.readouterr().err.strip().splitlines()[-1]
    assert line.startswith("usage-error flag=--input expected=archspec/1,traincfg/1,matrix/1,ckpt/1 message=")


def test_missing_required_flag(capsys: pytest.CaptureFixture[str]) -> None:
    assert _exit_code(["analyze"]) == USAGE_ERROR_EXIT

    assert "--arch" in capsys.readouterr().err


def test_domain_error_exits_with_one_line(capsys: pytest.CaptureFixture[str]) -> None:
    assert _exit_code(["analyze", "--arch", "wrn", "--depth", "23", "--widen", "1"]) == ERROR_EXIT

    line = capsys.readouterr().err.strip().splitlines()[-1]
    assert line.startswith("error code=InvalidDepthError message=")


def test_non_divisible_policy(capsys: pytest.CaptureFixture[str]) -> None:
    assert _exit_code(["analyze", *WRN_22X2, "--policy", "g=3"]) == ERROR_EXIT

    assert "error code=NonDivisibleError" in capsys.readouterr().err


def test_missing_config(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    assert _exit_code(["matrix", "-c", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == ERROR_EXIT

    assert "error code=FileNotFoundError" in capsys.readouterr().err


# MATRIX / REPORT TESTS
# =====================
def test_empty_matrix(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    matrix = tmp_path / "matrix.json"
    _ = matrix.write_text("{}", encoding="utf-8")

    main(["matrix", "-c", str(matrix), "--out", str(tmp_path / "out")])

    assert capsys.readouterr().out.strip() == ",".join(RESULT_COLUMNS)
    assert (tmp_path / "out" / RESULTS_FILE).exists()


def test_report(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    rows = [
        ("wrn", 10, 1, "g2", True, "hard", "", 0, 70.0, 90.0, 1, 1, 1),
        ("wrn", 10, 1, "g2", False, "hard", "", 0, 60.0, 80.0, 1, 1, 1),
        ("wrn", 10, 1, "g2", False, "distilled", "G16", 0, 65.0, 80.0, 1, 1, 1),
    ]
    results = tmp_path / RESULTS_FILE
    _ = results.write_text(pd.DataFrame(rows, columns=RESULT_COLUMNS).to_csv(index=False), encoding="utf-8")

    main(["report", "--results", str(results)])

    out = capsys.readouterr().out
    assert out.startswith("wrn-10x1")
    assert "It-Ss" in out
    assert "R-G16" in out
    assert "10.00" in out
    assert "-5.00" in out


def test_report_needs_result_columns(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    results = tmp_path / RESULTS_FILE
    _ = results.write_text("policy,seed\ng2,0\n", encoding="utf-8")

    assert _exit_code(["report", "--results", str(results)]) == ERROR_EXIT

    assert "error code=DataError" in capsys.readouterr().err


# END-TO-END TESTS
# ================
@pytest.mark.slow
def test_train_distill_viz(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    config = tmp_path / "config.json"
    _ = config.write_text(
        json.dumps({
            "schema": "traincfg/1",
            "sgd": {"epochs": 1, "batch_size": 64},
            "augmentation": {"enabled": False},
        }),
        encoding="utf-8",
    )
    wrn = ["--arch", "wrn", "--depth", "10", "--widen", "1", "-c", str(config)]
    teacher, student = tmp_path / "teacher", tmp_path / "student"

    main(["train", *wrn, "--policy", "G=16", "--out", str(teacher)])
    main([
        "distill", *wrn, "--policy", "g=2", "--residual", "false", "--teacher-run", str(teacher), "--out", str(student)
    ])
    main(["viz", "--run", str(student), "--worst-k", "2", "--project", "--out", str(tmp_path / "viz.csv")])

    out = capsys.readouterr().out.splitlines()
    assert "final test" in out[0]
    assert json.loads(out[-1])["rows"] == 16
    for run in (teacher, student):
        assert (run / CHECKPOINT_FILE).exists()
    stats = json.loads((student / STATS_FILE).read_text(encoding="utf-8"))
    assert stats["distilled"]
    assert list(pd.read_csv(tmp_path / "viz.csv").columns) == ["sample_id", "class_id", "x", "y"]
