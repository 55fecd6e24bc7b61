"""Error types shared by every package of the bench."""


class GestaltError(Exception):
    """Base class for all bench errors."""


class InvalidArgumentError(GestaltError, ValueError):
    """An argument violates an operation's precondition."""


class NotFoundError(GestaltError, LookupError):
    """A referenced region, token, family or checkpoint does not exist."""


class ConfigError(GestaltError):
    """Configuration or checkpoint manifest is inconsistent."""


class GenerationFailure(GestaltError):
    """A scene spec could not be satisfied within the retry budget."""


class OracleMismatchError(GestaltError):
    """An emitted answer disagrees with the geometry oracle."""


class UninitializedError(GestaltError, RuntimeError):
    """Parameters were used before being initialized or loaded."""


class TrainingDivergedError(GestaltError):
    """The training loss became NaN or infinite."""

    def __init__(self, message: str, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path
