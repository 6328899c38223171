"""Exception types shared across the engine.

Every error raised on a public surface is one of these, so callers can
distinguish bad input from protocol misuse from I/O trouble.
"""


class CefiError(Exception):
    """Base class for all engine errors."""


class InvalidInput(CefiError):
    """Numeric input violates a precondition (non-finite, empty, bad range)."""


class DegenerateVector(CefiError):
    """A zero-norm vector reached an operation that needs a direction."""


class ShapeError(CefiError):
    """Array shapes are incompatible with the requested operation."""


class ProtocolError(CefiError):
    """Operations called out of order (e.g. backward before forward)."""


class InvalidBatch(CefiError):
    """A batch is too small or malformed for the requested loss."""


class InvalidLabel(CefiError):
    """A class label lies outside [0, num_classes)."""


class InvalidConfig(CefiError):
    """A configuration value violates its documented range or combination."""


class LabelUnavailable(CefiError):
    """Labels were requested from a dataset that intentionally has none."""


class PartitionFailed(CefiError):
    """A random partition could not satisfy its constraints within budget."""


class FormatError(CefiError):
    """A binary file does not match the expected layout.

    Attributes:
        offset: byte offset at which the problem was detected.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class RoundAborted(CefiError):
    """A federated round was aborted; no partial updates were applied."""


class MissingOracleLabel(CefiError):
    """The oracle ensemble rule needs the true label but none was given."""


class StageDependencyError(CefiError):
    """A pipeline stage is missing an artifact from an earlier stage."""


class ConfigMismatch(CefiError):
    """An artifact was produced under a different configuration hash."""


class IoError(CefiError):
    """A report or artifact could not be written."""
