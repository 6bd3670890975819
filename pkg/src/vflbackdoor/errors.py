"""Exception hierarchy. The CLI maps each family to an exit code."""


class VFLError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(VFLError, ValueError):
    """Invalid configuration or argument shapes (CLI exit code 1)."""


class DataError(VFLError, OSError):
    """Missing, malformed or inconsistent dataset files (CLI exit code 2)."""


class ProtocolError(VFLError, RuntimeError):
    """A message broke the round contract, e.g. an interceptor changed its shape."""

    def __init__(self, site: str, message: str):
        super().__init__(f"[{site}] {message}")
        self.site = site


class InvariantError(VFLError, AssertionError):
    """An internal self-check failed (CLI exit code 3)."""
