"""Exception hierarchy.

Everything raised on bad input derives from :class:`ValidationError` so the CLI
can map it to exit code 2; numerical breakdowns derive from
:class:`RegistrationError` (exit code 3).
"""


class DirregError(Exception):
    """Base class for all package errors."""


class ValidationError(DirregError, ValueError):
    """Input violates a documented precondition."""


class RegistrationError(DirregError, RuntimeError):
    """Numerical failure during evaluation or optimization."""


class EmptyShape(ValidationError):
    pass


class DegenerateShape(ValidationError):
    pass


class DimensionError(ValidationError):
    pass


class InvalidConcentration(ValidationError):
    pass


class InvalidDimension(ValidationError):
    pass


class DegenerateKernel(ValidationError):
    pass


class MissingNormals(ValidationError):
    pass


class FamilyMismatch(ValidationError):
    pass


class GridMismatch(ValidationError):
    pass


class DegenerateCurve(ValidationError):
    pass


class InsufficientPoints(ValidationError):
    pass


class InvalidFraction(ValidationError):
    pass


class CountMismatch(ValidationError):
    pass


class ScheduleExhausted(ValidationError):
    pass


class ParseError(ValidationError):
    pass


class UnsupportedFormat(ValidationError):
    pass


class SingularJacobian(RegistrationError):
    def __init__(self, index, det):
        super().__init__(f"singular TPS Jacobian at point {index} (|det J| = {abs(det):.3g})")
        self.index = index
        self.det = det


class NonFiniteObjective(RegistrationError):
    pass


class IsolatedVertex(ValidationError):
    def __init__(self, indices):
        super().__init__(f"{len(indices)} vertices belong to no face")
        self.indices = list(indices)
