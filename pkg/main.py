from __future__ import annotations

import json
import sys

from loguru import logger
from pydantic import ValidationError

from src.commands import run_command
from src.config import read_args
from src.errors import RdlError
from src.log import configure_logger
from src.runtime import RuntimeSettings, set_runtime

ERROR_EXIT = 1


def fail(error: BaseException) -> None:
    """Print a single machine-parsable error line and exit."""
    logger.critical(f"{type(error).__name__}: {error}")
    message = json.dumps(" ".join(str(error).split()))
    print(f"error code={type(error).__name__} message={message}", file=sys.stderr)  # noqa: T201
    sys.exit(ERROR_EXIT)


def main(argv: list[str] | None = None) -> None:
    # SETUP
    # =====
    args = read_args(argv)
    configure_logger(debug=args.debug)

    try:
        set_runtime(RuntimeSettings.from_env())
    except ValidationError as e:
        fail(e)

    # COMMAND
    # =======
    try:
        run_command(args)
    except (RdlError, ValidationError, FileNotFoundError) as e:
        fail(e)


if __name__ == "__main__":
    main()
