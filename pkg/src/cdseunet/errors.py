"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Tensor or image extents do not satisfy an operation's contract."""


class ConfigError(ValueError):
    """A configuration value violates a documented invariant."""


class UsageError(RuntimeError):
    """An API was called in a state where it cannot proceed."""


class ParseError(ValueError):
    """Malformed file content. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class LoadError(RuntimeError):
    """A dataset entry or checkpoint could not be loaded."""
