"""Exception hierarchy. The CLI maps each class to an exit code."""


class MistError(Exception):
    pass


class ConfigError(MistError):
    """Config file could not be parsed, or holds an unknown/mistyped key."""

    def __init__(self, message: str, key: str | None = None):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


class ValidationError(MistError, ValueError):
    """A value violates a documented invariant."""

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class ShapeError(ValidationError):
    pass


class FormatError(MistError):
    """Binary file has a bad header, version or is truncated."""

    def __init__(self, message: str, offset: int, path=None):
        self.offset = offset
        self.path = path
        where = f"{path} " if path is not None else ""
        super().__init__(f"{where}at byte {offset}: {message}")


class AlignmentError(ValidationError):
    pass


class UndefinedMetricError(MistError):
    """Metric needs both positive and negative frames but only one class is present."""
