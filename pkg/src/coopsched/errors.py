"""Exception types shared across the package."""


class CapacityError(ValueError):
    """A request exceeds what a generator or exact oracle can handle."""


class ConfigError(ValueError):
    """A configuration key is missing, unknown, or out of range."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


class DecodeError(ValueError):
    """A wire message could not be parsed.

    ``offset`` is the byte offset where parsing failed and ``field`` names the
    field that was being read.
    """

    def __init__(self, message, offset=0, field=None):
        where = f" (field {field!r} at byte {offset})" if field else f" (at byte {offset})"
        super().__init__(message + where)
        self.offset = offset
        self.field = field


class TrainingError(RuntimeError):
    """Training diverged (a loss became non-finite)."""

    def __init__(self, epoch, message="loss became non-finite"):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch


class ConsistencyFault(RuntimeError):
    """Agents computed different selection masks from identical inputs."""
