"""
Chunkwise exceptions

Everything the library raises on purpose derives from ChunkwiseError, so the
pipeline stages can catch one type and turn it into a StageResult.
"""
from typing import Optional


class ChunkwiseError(Exception):
    """Base class for all chunkwise errors."""


class ScenarioError(ChunkwiseError, ValueError):
    """
    A scenario violates one of its invariants.

    Attributes:
        field: Dotted path of the offending field (e.g. "hardware.alpha")
        invariant: Short statement of the violated rule
    """

    def __init__(self, message: str, field: Optional[str] = None, invariant: Optional[str] = None):
        super().__init__(message)
        self.field = field
        self.invariant = invariant


class ScenarioParseError(ScenarioError):
    """A scenario file could not be parsed."""

    def __init__(self, message: str, line: Optional[int] = None, field: Optional[str] = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message, field=field, invariant="parseable scenario document")
        self.line = line


class NumericalHealthError(ChunkwiseError, ArithmeticError):
    """Kernel produced non-finite values."""


class MissingActivationsError(ChunkwiseError):
    """Backward was called without the activations saved by forward."""


class PartitionError(ChunkwiseError, ValueError):
    """A chunk partition does not cover the token range properly."""


class TraceError(ChunkwiseError, ValueError):
    """Bad routing trace parameters, shapes or files."""


class StaticInfeasibleError(ChunkwiseError):
    """Static memory alone exceeds the usable GPU memory; chunking cannot help."""


class PlanningError(ChunkwiseError, ValueError):
    """Chunk planning failed (bad bins, dimension mismatch, no token budget)."""


class ThroughputError(ChunkwiseError, ValueError):
    """Invalid inputs to the throughput model."""


class MemoryModelError(ChunkwiseError, ValueError):
    """Inputs outside what the memory model can describe."""


class MeterError(ChunkwiseError):
    """Activation meter released more than it holds."""
