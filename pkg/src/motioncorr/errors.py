"""Exception types shared across the package.

The CLI maps these onto process exit codes.
"""


class ConfigError(ValueError):
    """Invalid configuration or argument; ``field`` names the offending entry."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class FormatError(ValueError):
    """Malformed file contents; ``offset`` is the byte offset of the problem."""

    def __init__(self, message, offset=0):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class NumericalError(RuntimeError):
    """NaN/Inf or divergence detected during a numerical computation."""
