"""Exception types shared across the package."""


class GraphPromptError(Exception):
    """Base class for every error raised by this package."""


class IngestionError(GraphPromptError):
    """A mandatory dataset file is missing or unreadable."""


class FormatError(GraphPromptError):
    """A dataset file is readable but violates the expected format."""


class SamplingError(GraphPromptError):
    """No valid sample exists for the requested configuration."""


class TaskConstructionError(GraphPromptError):
    """A k-shot task cannot be built from the available instances."""


class ShapeError(GraphPromptError, ValueError):
    """Operand shapes are incompatible."""

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        joined = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class ContractError(GraphPromptError, ValueError):
    """A documented precondition was violated by the caller."""


class DimensionMismatchError(ContractError):
    """Dataset and encoder (or head) dimensions disagree."""


class PretrainingError(GraphPromptError):
    """Pre-training cannot proceed (e.g. no valid triplets anywhere)."""


class CheckpointError(GraphPromptError):
    """A checkpoint or head document cannot be parsed."""


class IncompatibleVersionError(CheckpointError):
    """A document was written by an unsupported format version."""


class ConfigError(GraphPromptError):
    """A run configuration is invalid."""
