from __future__ import annotations

from typing import TYPE_CHECKING

import pandas as pd
from loguru import logger

from src.errors import DataError
from src.experiments.metrics import MetricTable, tables_from_results
from src.experiments.runner import RESULT_COLUMNS

if TYPE_CHECKING:
    from pathlib import Path

NETWORK_KEYS = ["family", "depth", "widen"]


def load_results(path: Path) -> pd.DataFrame:
    """Read a results CSV.

    Raises:
        FileNotFoundError: If the file does not exist.
        DataError: If columns are missing.
    """
    if not path.exists():
        msg = f"Results file {path} not found."
        raise FileNotFoundError(msg)

    frame = pd.read_csv(path, float_precision="round_trip", dtype={"policy": str, "teacher": str, "mode": str})
    if missing := [c for c in RESULT_COLUMNS if c not in frame.columns]:
        msg = f"{path} lacks result columns {missing}"
        raise DataError(msg)
    frame["teacher"] = frame["teacher"].fillna("")
    frame["residual"] = frame["residual"].astype(str).str.lower() == "true"
    return frame


def network_label(family: str, depth: float, widen: float) -> str:
    if pd.isna(depth) or pd.isna(widen):
        return str(family)
    return f"{family}-{int(depth)}x{int(widen)}"


def tables_by_network(results: pd.DataFrame) -> dict[str, MetricTable]:
    """One mean metric table per network of a results frame, in order of appearance."""
    tables: dict[str, MetricTable] = {}
    for (family, depth, widen), group in results.groupby(NETWORK_KEYS, sort=False, dropna=False):
        tables[network_label(str(family), float(depth), float(widen))] = tables_from_results(group)[0]
    return tables


def render_report(results: pd.DataFrame) -> str:
    """Printed accuracy tables with their drop and gain rows, one block per network."""
    blocks: list[str] = []
    for name, table in tables_by_network(results).items():
        logger.debug(f"{name}: {len(table.teachers)} teachers x {len(table.students)} students")
        blocks.append(f"{name}\n{table.render()}")
    return "\n\n".join(blocks)
