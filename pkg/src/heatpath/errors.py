"""Exception types shared across the package."""


class HeatPathError(Exception):
    """Base class for all errors raised by heatpath."""


class CutLocusError(HeatPathError):
    """A geodesic was requested between a point and its cut locus."""

    def __init__(self, message="endpoints are cut points of each other", segment=None):
        if segment is not None:
            message = f"{message} (segment {segment})"
        super().__init__(message)
        self.segment = segment


class DomainError(HeatPathError):
    """Argument outside the domain where a quantity is defined."""


class UnsupportedModel(HeatPathError):
    """Requested construction is not implemented on this model manifold."""


class TruncationError(HeatPathError):
    """A spectral series cannot reach the requested tail bound."""

    def __init__(self, message, required=None):
        super().__init__(message)
        self.required = required


class AssemblyError(HeatPathError):
    """A discretised operator failed a structural check."""


class StepError(HeatPathError):
    """Finite-difference step is too small for floating-point cancellation."""


class ResolutionError(HeatPathError):
    """Quadrature resolution is too coarse for the integrand."""

    def __init__(self, message, required_nodes=None):
        super().__init__(message)
        self.required_nodes = required_nodes


class NonPositiveOperatorError(HeatPathError):
    """An operator expected to be positive has a non-positive eigenvalue."""


class EvaluationError(HeatPathError):
    """An evaluator failed at a given schedule index."""

    def __init__(self, index, cause):
        super().__init__(f"evaluation failed at index {index!r}: {cause}")
        self.index = index
        self.cause = cause


class ConfigError(HeatPathError):
    """Inconsistent configuration (e.g. grid built on a different manifold)."""
