"""Exception hierarchy. Every error carries a short machine-readable `kind`."""


class PatchSimError(Exception):
    """Base class for all domain errors raised by this package."""

    kind = "error"


class ConfigurationError(PatchSimError):
    """Inconsistent shapes, specs, weights, or invalid construction arguments."""

    kind = "config"


class DecodeError(PatchSimError):
    """Malformed image or weight stream. Names the byte offset when known."""

    kind = "decode"

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class RangeError(PatchSimError):
    """Out-of-bounds crop, schedule query, or sampling request."""

    kind = "range"


class GenerationError(PatchSimError):
    """Degenerate dataset construction (identical distortion pair, etc.)."""

    kind = "generation"


class MissingLabelError(PatchSimError):
    """A labeled record was required but no votes are present."""

    kind = "missing-label"


class UndefinedResultError(PatchSimError):
    """Statistic has no defined value (no positives, zero rank variance)."""

    kind = "undefined"


class ConflictError(PatchSimError):
    """Out-of-order answer for a collection session."""

    kind = "conflict"


class NotFoundError(PatchSimError):
    """Unknown or expired session / item."""

    kind = "not-found"
