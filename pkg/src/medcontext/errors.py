"""Exception hierarchy shared by every medcontext module."""


class MedContextError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(MedContextError, ValueError):
    """Tensor extents are incompatible with the requested operation."""


class ContractError(MedContextError, ValueError):
    """A precondition of an operation was violated."""


class NumericError(MedContextError, ArithmeticError):
    """A non-finite value was produced or consumed."""


class ConfigError(MedContextError, ValueError):
    pass


class GenerationError(MedContextError, RuntimeError):
    pass


class TrainingError(MedContextError, RuntimeError):
    pass


class FormatError(MedContextError, ValueError):
    """A binary file does not follow its declared layout."""


class VersionError(FormatError):
    pass
