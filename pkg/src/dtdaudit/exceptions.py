"""Exception hierarchy shared by all modules."""


class DTDError(Exception):
    """Base class for every error raised by dtdaudit."""


class InputShapeError(DTDError, ValueError):
    """An input vector or matrix has the wrong shape or non-finite entries."""


class ClassIndexError(DTDError, IndexError):
    """The explained output index is outside the network's output range."""


class OrthogonalDirection(DTDError):
    """The search direction is (numerically) orthogonal to the weight row."""


class ZeroRelevance(DTDError):
    """The neuron carries no relevance; the root would coincide with the input.

    Callers skip the neuron: its contribution is zero.
    """


class DegenerateDenominator(DTDError, ZeroDivisionError):
    """A propagation denominator vanished while relevance is non-zero."""


class RootUnavailable(DTDError):
    """A root policy could not supply an admissible root point."""


class SamplerExhausted(DTDError):
    """Rejection sampling did not find enough inputs within its draw budget."""


class BoundaryProximity(DTDError):
    """A finite-difference stencil is too close to (or crosses) a ReLU hinge."""


class UnreachableTarget(DTDError):
    """The requested relevance cannot be produced by any root point."""
