"""Exception and warning types raised across the package."""


class CoreFlowError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(CoreFlowError, ValueError):
    pass


class RankDeficient(CoreFlowError, ArithmeticError):
    pass


class NotSymmetric(CoreFlowError, ValueError):
    pass


class NonFiniteLoss(CoreFlowError, ArithmeticError):
    def __init__(self, step, value=float("nan")):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step


class NonFiniteState(CoreFlowError, ArithmeticError):
    pass


class BoundInapplicable(CoreFlowError, ValueError):
    pass


class BatchTooSmall(CoreFlowError, ValueError):
    pass


class IncompleteData(CoreFlowError, ValueError):
    pass


class PriorInvalid(CoreFlowError, ValueError):
    pass


class CholeskyFailure(CoreFlowError, ArithmeticError):
    pass


class ConfigError(CoreFlowError, ValueError):
    pass


class IoError(CoreFlowError, OSError):
    pass


class BadMagic(IoError):
    pass


class VersionMismatch(IoError):
    pass


class TruncatedPayload(IoError):
    pass


class FormatError(IoError, ShapeMismatch):
    """Payload decodes but violates the format's value or shape rules."""


class RankTooLarge(UserWarning):
    pass


class DegenerateBandwidth(UserWarning):
    pass


class EmptyMask(UserWarning):
    pass


class LooseOrthonormality(UserWarning):
    pass
