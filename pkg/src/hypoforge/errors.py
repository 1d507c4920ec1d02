"""Exception hierarchy shared across the package."""

from __future__ import annotations


class HypoforgeError(Exception):
    """Base class for every error raised by this package."""


class SequencingError(HypoforgeError):
    """A trace record arrived out of order."""


class TraceStateError(HypoforgeError):
    """A trace operation was attempted on a run that is not open."""


class ContextError(HypoforgeError):
    """A prompt context is missing a field its template requires."""


class ParseError(HypoforgeError):
    """Agent output does not follow the expected line protocol."""


class RangeError(ParseError):
    """A parsed score lies outside its permitted scale."""


class ConsistencyError(ParseError):
    """A stated total disagrees with the per-metric scores."""


class ProtocolError(ParseError):
    """Output is well formed but violates a protocol rule."""


class TransportError(HypoforgeError):
    """A remote call failed after exhausting its retries."""


class FixtureMissError(HypoforgeError):
    """The scripted backend holds no response for a prompt digest."""


class BudgetExceeded(HypoforgeError):
    """The token budget for a run has been used up."""


class GraphLoadError(HypoforgeError):
    """A knowledge-graph source failed validation."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class InputError(HypoforgeError):
    """Caller supplied an argument outside the operation's domain."""


class SelectionError(HypoforgeError):
    """The Explorer reply selected no usable node."""


class ExhaustedError(HypoforgeError):
    """A query relaxation ladder has no further stage."""


class DirectiveError(HypoforgeError):
    """Every action of a refinement directive failed."""


class IdentifiabilityError(HypoforgeError):
    """A comparison design does not identify every ability."""

    def __init__(self, components: list[list[str]]):
        self.components = components
        groups = "; ".join("{" + ", ".join(c) + "}" for c in components)
        super().__init__(f"comparison graph is disconnected: {groups}")


class FitError(HypoforgeError):
    """A statistical fit produced non-finite or unusable results."""
