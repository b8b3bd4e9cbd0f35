"""Exception types shared across the package."""


class DelaycastError(Exception):
    """Base class for all delaycast errors."""


class ParseError(DelaycastError):
    """Malformed input data; the message names the offending file line."""


class ConfigError(DelaycastError):
    """Invalid configuration, model specification or argument combination."""


class InitializationError(DelaycastError):
    """Chain initialization failed to reach a finite log-posterior."""
