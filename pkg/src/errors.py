class RdlError(ValueError):
    """Base class for every domain error raised by the lab."""


class SchemaError(RdlError):
    """A document declares a schema tag this version does not understand."""


class NonDivisibleError(RdlError):
    """A grouping policy cannot be applied to a layer of the given width."""


class InvalidDepthError(RdlError):
    """A WRN depth does not give a whole number of blocks per stage."""


class ShapeMismatchError(RdlError):
    pass


class DomainError(RdlError):
    """An input lies outside the domain of a mathematical operation."""


class GraphConsumedError(RdlError):
    """Backward was called on a graph whose recording has already been released."""


class CheckpointMismatchError(RdlError):
    """A checkpoint does not hold the tensors a network spec expects."""


class DataError(RdlError):
    pass


class CorruptRecordError(DataError):
    def __init__(self, offset: int, detail: str) -> None:  # noqa: D107
        self.offset = offset
        super().__init__(f"Corrupt record at byte offset {offset}: {detail}")


class WrongLengthError(DataError):
    def __init__(self, file: str, expected: int, got: int) -> None:  # noqa: D107
        self.file = file
        self.expected = expected
        self.got = got
        super().__init__(f"{file}: size {got} is not a multiple of the record length {expected}")


class EmptyListError(RdlError):
    pass


class UnknownClassError(RdlError):
    pass


class DegenerateDataError(RdlError):
    """Data has no spread to project (all rows identical)."""
