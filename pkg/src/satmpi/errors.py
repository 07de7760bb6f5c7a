"""Exception hierarchy.

Validation errors (bad input, malformed files, shape problems) and runtime
errors (numerical failures during a computation) are kept apart so the CLI
can map them to distinct exit codes.
"""


class SatMpiError(Exception):
    pass


class ValidationError(SatMpiError):
    pass


class ComputationError(SatMpiError):
    pass


class ParseError(ValidationError):
    def __init__(self, line, reason):
        self.line = line
        self.reason = reason
        super().__init__(f"line {line}: {reason}")


class InvariantViolation(ValidationError):
    pass


class InvalidRange(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class EmptyMask(ValidationError):
    pass


class SingularView(ValidationError):
    pass


class DenominatorNearZero(ComputationError):
    def __init__(self, index):
        self.index = index
        super().__init__(f"RPC denominator near zero at point {index}")


class NoConvergence(ComputationError):
    def __init__(self, index, residual):
        self.index = index
        self.residual = residual
        super().__init__(
            f"localization did not converge at point {index} (residual {residual:.3g})"
        )


class Divergence(ComputationError):
    pass


class EmptyOutput(ComputationError):
    pass
