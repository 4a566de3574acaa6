from typing import Any

import pandas as pd
import pytest
from pydantic import ValidationError

from src.errors import EmptyListError
from src.experiments.metrics import (
    DROP_ROW,
    GAIN_ROW,
    MetricTable,
    accuracy_drop,
    distillation_gain,
    tables_from_results,
)

# Published rows are rounded to two decimals, so derived values may differ by one unit in the last place.
PUBLISHED_TOLERANCE = 0.0101


def _table(entry: dict[str, Any]) -> MetricTable:
    return MetricTable(
        students=tuple(entry["students"]),
        teachers=tuple(entry["teachers"]),
        distilled=tuple(tuple(row) for row in entry["distilled"]),
        baseline=tuple(entry["baseline"]),
        nr_baseline=tuple(entry["nr_baseline"]),
    )


@pytest.fixture
def small() -> MetricTable:
    return MetricTable(
        students=("NR-g2", "NR-g4"),
        teachers=("R-G1", "R-G2"),
        distilled=((70.0, None), (71.5, 68.0)),
        baseline=(72.0, 70.0),
        nr_baseline=(65.0, None),
    )


# DERIVED ROW TESTS
# =================
def test_drop_and_gain() -> None:
    assert accuracy_drop(73.47, 66.14) == pytest.approx(7.33)
    assert distillation_gain([71.93, 70.76, 70.14], 73.47) == pytest.approx(-1.54)


def test_gain_needs_values() -> None:
    with pytest.raises(EmptyListError):
        _ = distillation_gain([], 70.0)


def test_published_tables(published_tables: dict[str, list[dict[str, Any]]]) -> None:
    for network, entries in published_tables.items():
        for entry in entries:
            table = _table(entry)
            drop, gain = list(table.accuracy_drop), list(table.distillation_gain)
            assert drop == pytest.approx(entry["accuracy_drop"], abs=PUBLISHED_TOLERANCE), network
            assert gain == pytest.approx(entry["distillation_gain"], abs=PUBLISHED_TOLERANCE), network


def test_derived_rows_ignore_teacher_order(published_tables: dict[str, list[dict[str, Any]]]) -> None:
    entry = published_tables["WRN-22x2"][0]
    table = _table(entry)
    reversed_table = table.model_copy(update={"teachers": table.teachers[::-1], "distilled": table.distilled[::-1]})

    assert reversed_table.distillation_gain == table.distillation_gain
    assert reversed_table.accuracy_drop == table.accuracy_drop


def test_absent_cells_propagate(small: MetricTable) -> None:
    assert small.accuracy_drop == (7.0, None)
    assert small.distillation_gain == (-0.5, -2.0)
    assert small.column("NR-g4") == [None, 68.0]


def test_shape_is_checked() -> None:
    with pytest.raises(ValidationError):
        _ = MetricTable(
            students=("NR-g2",),
            teachers=("R-G1",),
            distilled=((70.0, 71.0),),
            baseline=(72.0,),
            nr_baseline=(65.0,),
        )


# FRAME TESTS
# ===========
def test_frame_layout(small: MetricTable) -> None:
    frame = small.to_frame()

    assert list(frame.index) == ["R-G1", "R-G2", "Baseline", "NR-baseline", DROP_ROW, GAIN_ROW]
    assert list(frame.columns) == ["NR-g2", "NR-g4"]
    assert frame.loc[DROP_ROW, "NR-g2"] == pytest.approx(7.0)
    assert pd.isna(frame.loc["R-G1", "NR-g4"])
    assert list(small.to_frame(derived=False).index) == ["R-G1", "R-G2", "Baseline", "NR-baseline"]


def test_frame_round_trip(small: MetricTable) -> None:
    assert MetricTable.from_frame(small.to_frame()) == small
    assert MetricTable.from_frame(small.to_frame(derived=False)) == small


def test_from_frame_needs_baselines(small: MetricTable) -> None:
    with pytest.raises(ValueError, match="Baseline"):
        _ = MetricTable.from_frame(small.to_frame().drop(index="Baseline"))


def test_render(small: MetricTable) -> None:
    text = small.render()

    assert "It-Ss" in text
    assert "71.50" in text
    assert "7.00" in text
    assert next(line for line in text.splitlines() if line.startswith("R-G1")).endswith("-")


# AGGREGATION TESTS
# =================
RESULT_COLUMNS = ["policy", "residual", "mode", "seed", "top1_test", "teacher"]


def test_tables_from_results() -> None:
    results = pd.DataFrame(
        [
            ("g2", True, "hard", 0, 70.0, ""),
            ("g2", True, "hard", 1, 72.0, ""),
            ("g2", False, "hard", 0, 60.0, ""),
            ("g2", False, "hard", 1, 64.0, ""),
            ("g2", False, "distilled", 0, 66.0, "G1"),
            ("g2", False, "distilled", 1, 68.0, "G1"),
            ("g4", False, "hard", 0, 61.0, ""),
        ],
        columns=RESULT_COLUMNS,
    )

    mean, std = tables_from_results(results)

    assert mean.students == ("NR-g2", "NR-g4")
    assert mean.teachers == ("R-G1",)
    assert mean.baseline == (71.0, None)
    assert mean.nr_baseline == (62.0, 61.0)
    assert mean.distilled == ((67.0, None),)
    assert mean.accuracy_drop == (9.0, None)
    assert mean.distillation_gain == (-4.0, None)
    assert std.baseline == (1.0, None)
    assert std.nr_baseline == (2.0, 0.0)


def test_tables_follow_given_order() -> None:
    results = pd.DataFrame(
        [
            ("g2", False, "hard", 0, 60.0, ""),
            ("g4", False, "hard", 0, 61.0, ""),
        ],
        columns=RESULT_COLUMNS,
    )

    mean, _ = tables_from_results(results, students=["g4", "g2"], teachers=[])

    assert mean.students == ("NR-g4", "NR-g2")
    assert mean.nr_baseline == (61.0, 60.0)
    assert mean.distilled == ()
