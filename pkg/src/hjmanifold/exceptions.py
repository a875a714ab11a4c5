"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class HJManifoldError(Exception):
    exit_code = 3


class UsageError(HJManifoldError, ValueError):
    """Bad input: dimension mismatch, invalid configuration, unknown name."""

    exit_code = 2


class NumericalError(HJManifoldError, ArithmeticError):
    exit_code = 3


class NotHyperbolicError(NumericalError):
    """The Hamiltonian matrix has an eigenvalue on the imaginary axis."""


class ComplementarityError(NumericalError):
    """The stable eigenspace is not a graph over the x-coordinates."""


class NewtonFailure(NumericalError):
    def __init__(self, message, residual=float("nan")):
        super().__init__(message)
        self.residual = residual


class DerivativeCheckError(NumericalError):
    pass


class CertificateError(HJManifoldError):
    """A hypothesis of the convergence theorem is violated."""

    exit_code = 4
