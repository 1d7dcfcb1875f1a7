"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called with arguments outside its contract."""


class StateError(RuntimeError):
    """A layer or model was used in the wrong state (e.g. backward without forward)."""


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field(s)."""


class IngestionError(OSError):
    """A data file is missing, short, or otherwise unreadable."""


class FormatError(ValueError):
    """A file does not follow the expected layout."""
