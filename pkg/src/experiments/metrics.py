from __future__ import annotations

import math
from typing import TYPE_CHECKING, Self

import pandas as pd
from pydantic import BaseModel, ConfigDict, model_validator

from src.errors import EmptyListError

if TYPE_CHECKING:
    from collections.abc import Iterable, Sequence

BASELINE_ROW = "Baseline"
NR_BASELINE_ROW = "NR-baseline"
DROP_ROW = "Acc. drop"
GAIN_ROW = "Distil. gain"
RAW_ROWS = (BASELINE_ROW, NR_BASELINE_ROW)
DERIVED_ROWS = (DROP_ROW, GAIN_ROW)
CORNER_LABEL = "It-Ss"
DISPLAY_DECIMALS = 2

type Cell = float | None


def accuracy_drop(r_baseline: float, nr_baseline: float) -> float:
    """Accuracy lost by removing every shortcut from a residual network trained on hard targets."""
    return r_baseline - nr_baseline


def distillation_gain(distilled_accs: Iterable[float], r_baseline: float) -> float:
    """Best distilled non-residual accuracy over all teachers, relative to the residual hard-target baseline.

    Raises:
        EmptyListError: If no distilled accuracy is given.
    """
    accs = list(distilled_accs)
    if not accs:
        msg = "Distillation gain needs at least one distilled accuracy"
        raise EmptyListError(msg)
    return max(accs) - r_baseline


def _present(values: Iterable[Cell]) -> list[float]:
    return [v for v in values if v is not None]


class MetricTable(BaseModel):
    """Teacher rows by student columns of distilled accuracies, plus the two baseline rows.

    The drop and gain rows are derived from the raw rows on demand and are never stored. Absent cells (failed or not
    run) are `None` and propagate to the derived rows of their column.

    Attributes:
        students (tuple[str, ...]): Column labels, e.g. `NR-g2`.
        teachers (tuple[str, ...]): Row labels, e.g. `R-G1`.
        distilled (tuple[tuple[Cell, ...], ...]): One row per teacher, one value per student.
        baseline (tuple[Cell, ...]): Residual hard-target accuracy of each student's policy.
        nr_baseline (tuple[Cell, ...]): Non-residual hard-target accuracy of each student.
    """

    model_config = ConfigDict(frozen=True)

    students: tuple[str, ...]
    teachers: tuple[str, ...]
    distilled: tuple[tuple[Cell, ...], ...]
    baseline: tuple[Cell, ...]
    nr_baseline: tuple[Cell, ...]

    @model_validator(mode="after")
    def check_shape(self) -> Self:
        width = len(self.students)
        if len(self.distilled) != len(self.teachers):
            msg = f"Expected {len(self.teachers)} teacher rows, got {len(self.distilled)}"
            raise ValueError(msg)
        for label, row in [*zip(self.teachers, self.distilled, strict=True), *self._raw_rows()]:
            if len(row) != width:
                msg = f"Row {label} has {len(row)} cells, expected {width}"
                raise ValueError(msg)
        return self

    def _raw_rows(self) -> list[tuple[str, tuple[Cell, ...]]]:
        return [(BASELINE_ROW, self.baseline), (NR_BASELINE_ROW, self.nr_baseline)]

    def column(self, student: str) -> list[Cell]:
        j = self.students.index(student)
        return [row[j] for row in self.distilled]

    @property
    def accuracy_drop(self) -> tuple[Cell, ...]:
        return tuple(
            None if r is None or nr is None else accuracy_drop(r, nr)
            for r, nr in zip(self.baseline, self.nr_baseline, strict=True)
        )

    @property
    def distillation_gain(self) -> tuple[Cell, ...]:
        gains: list[Cell] = []
        for student, r in zip(self.students, self.baseline, strict=True):
            accs = _present(self.column(student))
            gains.append(None if r is None or not accs else distillation_gain(accs, r))
        return tuple(gains)

    # FRAMES
    # ======
    def to_frame(self, *, derived: bool = True) -> pd.DataFrame:
        """The table as laid out in print: teacher rows, the two baseline rows, then the drop and gain rows."""
        rows = [*self.distilled, self.baseline, self.nr_baseline]
        index = [*self.teachers, *RAW_ROWS]
        if derived:
            rows += [self.accuracy_drop, self.distillation_gain]
            index += list(DERIVED_ROWS)

        frame = pd.DataFrame(
            [[math.nan if v is None else v for v in row] for row in rows],
            index=pd.Index(index, name=CORNER_LABEL),
            columns=list(self.students),
            dtype=float,
        )
        return frame

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> Self:
        """Rebuild a table from the raw rows of a frame; derived rows in the frame are ignored.

        Raises:
            ValueError: If a baseline row is missing.
        """
        missing = [row for row in RAW_ROWS if row not in frame.index]
        if missing:
            msg = f"Metric frame lacks rows {missing}"
            raise ValueError(msg)

        def cells(label: str) -> tuple[Cell, ...]:
            return tuple(None if pd.isna(v) else float(v) for v in frame.loc[label])

        teachers = tuple(str(i) for i in frame.index if i not in RAW_ROWS and i not in DERIVED_ROWS)
        return cls(
            students=tuple(str(c) for c in frame.columns),
            teachers=teachers,
            distilled=tuple(cells(t) for t in teachers),
            baseline=cells(BASELINE_ROW),
            nr_baseline=cells(NR_BASELINE_ROW),
        )

    def render(self, decimals: int = DISPLAY_DECIMALS) -> str:
        """Fixed-point text rendering; absent cells print as `-`."""
        frame = self.to_frame().round(decimals)
        return frame.to_string(float_format=lambda v: f"{v:.{decimals}f}", na_rep="-")


# AGGREGATION
# ===========
def _first_seen(values: Iterable[str]) -> list[str]:
    return list(dict.fromkeys(values))


def tables_from_results(
    results: pd.DataFrame,
    *,
    students: Sequence[str] | None = None,
    teachers: Sequence[str] | None = None,
) -> tuple[MetricTable, MetricTable]:
    """Aggregate per-seed results of one network family into mean and population-std metric tables.

    Args:
        results (pd.DataFrame): Rows with at least `policy`, `residual`, `mode`, `teacher` and `top1_test`.
        students (Sequence[str] | None): Student policy labels in column order; order of appearance when None.
        teachers (Sequence[str] | None): Teacher policy labels in row order; order of appearance when None.

    Returns:
        tuple[MetricTable, MetricTable]: Means over seeds, then population standard deviations.
    """
    hard = results[results["mode"] == "hard"]
    soft = results[results["mode"] == "distilled"]
    if students is None:
        students = _first_seen(hard.loc[~hard["residual"].astype(bool), "policy"].astype(str))
        students = _first_seen([*students, *soft["policy"].astype(str)])
    if teachers is None:
        teachers = _first_seen(soft["teacher"].astype(str))

    def stat(frame: pd.DataFrame, how: str) -> Cell:
        values = frame["top1_test"].astype(float)
        if values.empty:
            return None
        return float(values.mean()) if how == "mean" else float(values.std(ddof=0))

    def table(how: str) -> MetricTable:
        residual = hard["residual"].astype(bool)
        return MetricTable(
            students=tuple(f"NR-{s}" for s in students),
            teachers=tuple(f"R-{t}" for t in teachers),
            distilled=tuple(
                tuple(stat(soft[(soft["policy"] == s) & (soft["teacher"] == t)], how) for s in students)
                for t in teachers
            ),
            baseline=tuple(stat(hard[residual & (hard["policy"] == s)], how) for s in students),
            nr_baseline=tuple(stat(hard[~residual & (hard["policy"] == s)], how) for s in students),
        )

    return table("mean"), table("std")
