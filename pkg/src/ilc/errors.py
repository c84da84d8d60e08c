"""Exception hierarchy for the ilc package."""


class IlcError(Exception):
    """Base class for all errors raised by this package."""


class DimensionMismatchError(IlcError):
    """Operands have incompatible shapes."""


class NotHermitianError(IlcError):
    """A matrix expected to be Hermitian fails the tolerance check."""


class InvalidStateError(IlcError):
    """A state vector or density matrix violates its invariants."""


class EigenSolverError(IlcError):
    """The iterative eigensolver failed to converge within its sweep cap."""


class FrameMatchingError(IlcError):
    """Eigenvector continuity matching is ambiguous (branch crossing)."""


class ThetaBoundError(IlcError):
    """The perturbation-amplitude map violates its slope bound."""


class GammaSolverError(IlcError):
    """The implicit fixed-point solve did not converge (non-contraction)."""


class DesignError(IlcError):
    """A design step (constant offsets, spectrum) cannot meet its target.

    Carries ``residual`` when the failure is a least-squares residual above
    tolerance.
    """

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class ConfigError(IlcError):
    """A run configuration document is malformed.

    ``path`` points at the offending JSON location, e.g. ``channels[0].H``.
    """

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path


class SimulationError(IlcError):
    """A simulation step aborted; carries the step index and context."""

    def __init__(self, message, step=None, context=None):
        super().__init__(message)
        self.step = step
        self.context = context
