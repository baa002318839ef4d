"""Exception hierarchy shared by all fedprof modules."""


class FedprofError(Exception):
    """Base class for all errors raised by fedprof."""


class InputError(FedprofError):
    """A caller-supplied value violates an operation's precondition."""


class FormatError(FedprofError):
    """A binary file (IDX container, checkpoint) is malformed."""


class SpecError(InputError):
    """A distribution spec cannot be realized (e.g. negative class count)."""


class ConfigError(FedprofError):
    """An experiment or attack configuration is invalid."""


class StateError(FedprofError):
    """An operation was invoked on an object in the wrong state."""


class InternalError(FedprofError):
    """An internal consistency check failed (layout mismatch etc.)."""
