"""Exception hierarchy shared by all vfcert modules."""


class VfcertError(Exception):
    """Base class for every error raised by this package."""


class FormatError(VfcertError, ValueError):
    """A file or JSON document does not follow the expected schema."""


class DomainError(VfcertError, ValueError):
    """A coordinate or argument lies outside the domain of an operation."""


class ContractError(VfcertError, ValueError):
    """A caller violated an operation precondition (shapes, missing inputs)."""


class UnsupportedError(VfcertError):
    """The requested operation is not defined for this kind of input."""


class SolverError(VfcertError, RuntimeError):
    """The LP/MILP engine broke down numerically."""


class RootFindingError(VfcertError, ArithmeticError):
    """Durand-Kerner iteration did not converge.

    ``best`` holds the last iterate so callers can inspect or fall back.
    """

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class SoundnessError(VfcertError, AssertionError):
    """An observed value escaped a bound that was claimed to be sound."""
