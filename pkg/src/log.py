from __future__ import annotations

import sys
from contextlib import contextmanager
from typing import TYPE_CHECKING

from loguru import logger

if TYPE_CHECKING:
    from collections.abc import Iterator
    from pathlib import Path

RUN_LOG_FILE = "run.log"


def configure_logger(*, debug: bool) -> None:
    """Configure the stderr logger for use in processes and threads.

    The stderr format carries no timestamp; only the `run.log` sink of a run directory does.
    """
    logger.remove()
    _ = logger.add(
        sys.stderr,
        level="DEBUG" if debug else "WARNING",
        format="<level>{level: <8}</level> | {name}:{function} - {message}",
    )


@contextmanager
def run_log(run_dir: Path) -> Iterator[Path]:
    """Copy every DEBUG-and-above message to `run.log` inside a run directory while the context is open."""
    run_dir.mkdir(parents=True, exist_ok=True)
    log_path = run_dir / RUN_LOG_FILE
    sink_id = logger.add(log_path, level="DEBUG")
    try:
        yield log_path
    finally:
        logger.remove(sink_id)
