from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import pandas as pd
import pytest
from pydantic import ValidationError

from src.arch.builders import build_wrn
from src.arch.policy import GroupingPolicy
from src.arch.spec import Family
from src.config import MatrixConfig, TrainConfig
from src.data import SyntheticSource, load_splits
from src.distill.trainer import CHECKPOINT_FILE, STATS_FILE
from src.errors import NonDivisibleError
from src.experiments import runner
from src.experiments.runner import (
    FAILURES_FILE,
    METRIC_STD_FILE,
    METRIC_TABLE_FILE,
    RESULT_COLUMNS,
    RESULTS_FILE,
    RUNS_DIR,
    Cell,
    CellJob,
    ExperimentResult,
    plan_cells,
    results_frame,
    run_matrix,
    train_and_save,
)
from src.log import RUN_LOG_FILE

TINY_DATA = {"kind": "synthetic", "classes": 4, "samples_per_class": 8, "test_per_class": 2, "image_size": 8}
TINY_TRAIN = {"sgd": {"epochs": 1, "batch_size": 16}, "augmentation": {"enabled": False}}


def _matrix(**changes: Any) -> MatrixConfig:
    return MatrixConfig.model_validate({"dataset": TINY_DATA, "train": TINY_TRAIN, "parallelism": 1, **changes})


# PLANNING TESTS
# ==============
def test_cell_ids() -> None:
    g2, big = GroupingPolicy.parse("g2"), GroupingPolicy.parse("G1")

    assert Cell(policy=g2, residual=True, seed=0).id == "R-g2-s0"
    assert Cell(policy=g2, residual=False, seed=3).id == "NR-g2-s3"
    distilled = Cell(policy=g2, residual=False, seed=1, teacher=big)
    assert distilled.id == "NR-g2-from-R-G1-s1"
    assert distilled.mode == "distilled"
    assert distilled.teacher_cell() == Cell(policy=big, residual=True, seed=1)
    assert Cell(policy=g2, residual=True, seed=0).teacher_cell() is None


def test_plan_waves() -> None:
    config = MatrixConfig.model_validate({"students": ["g2", "g4"], "teachers": ["G1"], "seeds": [0, 1]})

    hard, distilled = plan_cells(config)

    assert [c.id for c in hard] == [
        "R-g2-s0",
        "R-g2-s1",
        "R-g4-s0",
        "R-g4-s1",
        "R-G1-s0",
        "R-G1-s1",
        "NR-g2-s0",
        "NR-g2-s1",
        "NR-g4-s0",
        "NR-g4-s1",
    ]
    assert len(distilled) == 4
    assert all(c.mode == "distilled" and not c.residual for c in distilled)
    hard_ids = {c.id for c in hard}
    for cell in distilled:
        teacher = cell.teacher_cell()
        assert teacher is not None
        assert teacher.id in hard_ids


def test_plan_shares_teacher_and_student_runs() -> None:
    config = MatrixConfig.model_validate({"students": ["g2", "g4"], "teachers": ["g2"]})

    hard, distilled = plan_cells(config)

    assert [c.id for c in hard if c.residual] == ["R-g2-s0", "R-g4-s0"]
    assert [c.id for c in distilled] == ["NR-g2-from-R-g2-s0", "NR-g4-from-R-g2-s0"]


def test_plan_keeps_first_seen_policy_order() -> None:
    config = MatrixConfig.model_validate({"students": ["g4", "g2"], "teachers": ["G1", "g4", "std", "g2"]})

    hard, distilled = plan_cells(config)

    assert [c.id for c in hard if c.residual] == ["R-g4-s0", "R-g2-s0", "R-G1-s0", "R-std-s0"]
    teachers = [c.teacher.label for c in distilled if c.teacher is not None]
    assert teachers == ["G1", "G1", "g4", "g4", "std", "std", "g2", "g2"]


def test_plan_of_full_matrix() -> None:
    config = MatrixConfig.model_validate(
        {"students": ["g2", "g4", "g8", "dw"], "teachers": ["std", "G1", "G2", "G4", "G8"], "seeds": [0, 1]}
    )

    hard, distilled = plan_cells(config)

    assert len(hard) == 9 * 2 + 4 * 2
    assert len(distilled) == 5 * 4 * 2


def test_empty_plan() -> None:
    assert plan_cells(MatrixConfig()) == []


def test_matrix_config_validation() -> None:
    with pytest.raises(ValidationError, match="unique"):
        _ = MatrixConfig.model_validate({"seeds": [0, 0]})
    with pytest.raises(ValidationError):
        _ = MatrixConfig.model_validate({"schema": "traincfg/1"})
    with pytest.raises(ValidationError):
        _ = MatrixConfig.model_validate({"students": ["g=0"]})


# MATRIX TESTS
# ============
def test_empty_matrix(tmp_path: Path) -> None:
    outcome = run_matrix(MatrixConfig(), tmp_path)

    assert outcome.results == []
    assert outcome.failures == []
    assert (tmp_path / RESULTS_FILE).read_text(encoding="utf-8").splitlines() == [",".join(RESULT_COLUMNS)]
    assert (tmp_path / FAILURES_FILE).read_text(encoding="utf-8").splitlines() == ["cell,error,message"]
    assert (tmp_path / METRIC_TABLE_FILE).exists()
    assert (tmp_path / METRIC_STD_FILE).exists()


def test_unbuildable_matrix_aborts_before_training(tmp_path: Path) -> None:
    out_dir = tmp_path / "matrix"

    with pytest.raises(NonDivisibleError):
        _ = run_matrix(_matrix(students=["g2", "g3"]), out_dir)

    assert not out_dir.exists()


def _fake_result(job: CellJob) -> ExperimentResult:
    cell = job.cell
    return ExperimentResult(
        family=Family.WRN,
        depth=10,
        widen=1,
        policy=cell.policy.label,
        residual=cell.residual,
        mode=cell.mode,
        teacher="" if cell.teacher is None else cell.teacher.label,
        seed=cell.seed,
        top1_test=50.0 + cell.seed,
        top1_train=60.0,
        params=1,
        flops=1,
        epochs=1,
    )


def test_failed_teacher_fails_its_students(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
    def fake_run_cell(job: CellJob) -> ExperimentResult:
        if job.cell.id == "R-G16-s0":
            msg = "diverged"
            raise RuntimeError(msg)
        return _fake_result(job)

    monkeypatch.setattr(runner, "run_cell", fake_run_cell)

    outcome = run_matrix(_matrix(students=["g2"], teachers=["G16", "G8"]), tmp_path)

    assert [f["cell"] for f in outcome.failures] == ["R-G16-s0", "NR-g2-from-R-G16-s0"]
    assert outcome.failures[0]["message"] == "diverged"
    assert [r.mode for r in outcome.results] == ["hard", "hard", "hard", "distilled"]
    failures = pd.read_csv(tmp_path / FAILURES_FILE)
    assert list(failures["cell"]) == ["R-G16-s0", "NR-g2-from-R-G16-s0"]
    assert outcome.table is not None
    assert outcome.table.teachers == ("R-G16", "R-G8")
    assert outcome.table.distilled == ((None,), (50.0,))


def test_results_follow_plan_order(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.setattr(runner, "run_cell", _fake_result)

    outcome = run_matrix(_matrix(students=["g2"], teachers=["G16"], seeds=[1, 0]), tmp_path)

    frame = pd.read_csv(tmp_path / RESULTS_FILE)
    assert list(frame.columns) == RESULT_COLUMNS
    assert list(zip(frame["residual"], frame["mode"], frame["seed"], strict=True)) == [
        (True, "hard", 1),
        (True, "hard", 0),
        (True, "hard", 1),
        (True, "hard", 0),
        (False, "hard", 1),
        (False, "hard", 0),
        (False, "distilled", 1),
        (False, "distilled", 0),
    ]
    assert outcome.std_table is not None
    assert outcome.std_table.baseline == (0.5,)


def test_tiny_matrix_trains(tmp_path: Path) -> None:
    outcome = run_matrix(_matrix(students=["g2"], teachers=["G16"]), tmp_path)

    assert outcome.failures == []
    assert [(r.policy, r.residual, r.mode) for r in outcome.results] == [
        ("g2", True, "hard"),
        ("G16", True, "hard"),
        ("g2", False, "hard"),
        ("g2", False, "distilled"),
    ]
    for result in outcome.results:
        assert 0.0 <= result.top1_test <= 100.0
        assert result.epochs == 1
        assert result.params > 0

    run_dir = tmp_path / RUNS_DIR / "NR-g2-from-R-G16-s0"
    for name in (CHECKPOINT_FILE, STATS_FILE, RUN_LOG_FILE):
        assert (run_dir / name).exists(), name
    stats = json.loads((run_dir / STATS_FILE).read_text(encoding="utf-8"))
    assert stats["distilled"]
    assert stats["cell"] == "NR-g2-from-R-G16-s0"

    table = pd.read_csv(tmp_path / METRIC_TABLE_FILE, index_col=0)
    assert list(table.columns) == ["NR-g2"]
    assert "R-G16" in table.index


# TRAINING HELPER TESTS
# =====================
def test_train_and_save_overrides(tmp_path: Path) -> None:
    train_data, test_data = load_splits(SyntheticSource.model_validate(TINY_DATA))
    spec = build_wrn(10, 1, GroupingPolicy.groups(2), residual=True, num_classes=4)
    config = TrainConfig.model_validate(TINY_TRAIN)

    result = train_and_save(spec, train_data, test_data, config, run_dir=tmp_path, seed=5, epochs=2)

    assert len(result.history) == 2
    stats = json.loads((tmp_path / STATS_FILE).read_text(encoding="utf-8"))
    assert stats["seed"] == 5
    assert not stats["distilled"]


def test_results_frame_columns() -> None:
    job = CellJob.model_construct(cell=Cell(policy=GroupingPolicy.parse("g2"), residual=False, seed=0))

    frame = results_frame([_fake_result(job)])

    assert list(frame.columns) == RESULT_COLUMNS
    assert frame.loc[0, "family"] == "wrn"
    assert results_frame([]).empty


def test_shipped_documents_validate() -> None:
    root = Path(__file__).parent.parent

    matrix = MatrixConfig.from_file(root / "matrix.json")
    train = TrainConfig.from_file(root / "config.json")

    assert matrix.family is Family.WRN
    assert [p.label for p in matrix.students] == ["g2", "g4", "g8"]
    assert len(plan_cells(matrix)[1]) == 9
    assert train.epochs_for(Family.MOBILENETV2, distilled=True) == 300
