from __future__ import annotations

import os
from typing import TYPE_CHECKING, Self

from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, field_validator

if TYPE_CHECKING:
    from collections.abc import Mapping

THREADS_ENV = "RDL_THREADS"
DETERMINISTIC_ENV = "RDL_DETERMINISTIC"


class RuntimeSettings(BaseModel):
    """Process-wide execution settings read from the environment."""

    model_config = ConfigDict(frozen=True)

    threads: int = Field(default=1, ge=1, description="Upper bound on worker threads/processes.")
    deterministic: bool = Field(
        default=False,
        description="Fix every reduction order so repeated runs are bitwise identical.",
    )

    @field_validator("deterministic", mode="before")
    @classmethod
    def parse_flag(cls, value: object) -> object:
        if isinstance(value, str):
            return value.strip() == "1"
        return value

    @classmethod
    def from_env(cls, environ: Mapping[str, str] | None = None) -> Self:
        """Read settings from `RDL_THREADS` and `RDL_DETERMINISTIC`.

        Raises:
            ValidationError: If `RDL_THREADS` is not a positive integer.
        """
        environ = os.environ if environ is None else environ
        values: dict[str, str] = {}

        if (threads := environ.get(THREADS_ENV)) is not None:
            values["threads"] = threads
        if (deterministic := environ.get(DETERMINISTIC_ENV)) is not None:
            values["deterministic"] = deterministic

        settings = cls.model_validate(values)
        logger.debug(f"Runtime settings: {settings}")
        return settings


_settings = RuntimeSettings()


def get_runtime() -> RuntimeSettings:
    return _settings


def set_runtime(settings: RuntimeSettings) -> None:
    global _settings  # noqa: PLW0603
    _settings = settings
