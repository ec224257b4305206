"""Exception hierarchy shared across the cache engine and harness."""


class TriStateError(Exception):
    """Base class for all errors raised by this package."""


class SequencingError(TriStateError):
    """A token was appended out of position order."""


class ConfigurationError(TriStateError, ValueError):
    """Budget, window or hyperparameter values are inconsistent."""


class WindowTooLargeError(ConfigurationError):
    pass


class DegenerateDistributionError(TriStateError, ValueError):
    pass


class IntegrityError(TriStateError):
    """A tailor plan or cache state violates a structural invariant."""


class NumericError(TriStateError, ValueError):
    pass


class LengthError(TriStateError, ValueError):
    pass


class TraceError(TriStateError):
    """Malformed or inconsistent attention trace file."""
