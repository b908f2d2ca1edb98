"""Exception types shared across the package."""


class DiffidError(Exception):
    """Base class for all package errors."""


class InvalidArgument(DiffidError, ValueError):
    """A precondition on an argument was violated."""


class IirExhaustedError(DiffidError, LookupError):
    """Every rare-token candidate is already present in the vocabulary."""


class BackendError(DiffidError, RuntimeError):
    """An external adapter backend is unreachable or misbehaved."""


class UnknownLabelError(DiffidError, LookupError):
    """A sample claims an identity the fitted model has never seen."""


class NotFoundError(DiffidError, LookupError):
    """A stored artifact id does not exist in the store."""


class IntegrityError(DiffidError):
    """Stored bytes do not match their recorded checksum or header."""


class ConfigValidationError(DiffidError):
    """Configuration text violates the schema; carries every violation."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))
