"""Exception hierarchy.

Every error raised by the package derives from :class:`SafePatchError`; the
CLI prints the class name as a machine-parsable token on stderr.
"""


class SafePatchError(Exception):
    """Base class for all package errors."""


class InvalidShapeError(SafePatchError, ValueError):
    pass


class NonFiniteError(SafePatchError, ArithmeticError):
    """A NaN or Inf was produced or supplied where finite values are required."""


class ContractError(SafePatchError, RuntimeError):
    pass


class StaleTapeError(ContractError):
    """``backward`` was called on a graph that has already been consumed."""


class InvalidConfigError(SafePatchError, ValueError):
    pass


class InvalidTokenError(SafePatchError, ValueError):
    pass


class InvalidPromptError(SafePatchError, ValueError):
    pass


class InvalidImageError(SafePatchError, ValueError):
    pass


class InvalidStepError(SafePatchError, ValueError):
    pass


class InvalidInjectionError(SafePatchError, ValueError):
    pass


class IncompatiblePatchError(SafePatchError, ValueError):
    pass


class NoSafeCandidateError(SafePatchError, RuntimeError):
    pass


class UndefinedRatioError(SafePatchError, ZeroDivisionError):
    pass


class CorruptFileError(SafePatchError, IOError):
    pass


class WrongKindError(SafePatchError, ValueError):
    pass
