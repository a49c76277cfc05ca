class SiscError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(SiscError, ValueError):
    pass


class InvalidBoxError(SiscError, ValueError):
    pass


class EmptySceneError(SiscError):
    pass


class UndefinedInputError(SiscError, ValueError):
    pass


class NoPriorError(SiscError, LookupError):
    pass


class PlacementError(SiscError):
    pass


class CompleterError(SiscError):
    """Raised by the loop when a completer fails; carries the partial trace."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class FormatError(SiscError):
    """A file on disk is malformed. ``offset`` is the byte offset of the problem."""

    def __init__(self, path, offset, message):
        super().__init__(f"{path}: offset {offset}: {message}")
        self.path = str(path)
        self.offset = offset
