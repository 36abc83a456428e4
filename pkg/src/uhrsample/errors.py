"""Exception types shared across the package."""


class UhrError(Exception):
    """Base class for all package errors."""


class RasterBoundsError(UhrError, ValueError):
    pass


class FormatError(UhrError, ValueError):
    """Malformed file content. ``lineno`` is set for line-oriented formats."""

    def __init__(self, message, lineno=None, path=None):
        self.lineno = lineno
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if lineno is not None:
            where += f":{lineno}" if where else f"line {lineno}"
        super().__init__(f"{where}: {message}" if where else message)


class DataError(UhrError, ValueError):
    pass


class EmptyRegionError(UhrError, ValueError):
    pass


class EvaluationError(UhrError, ValueError):
    pass


class ProtocolError(UhrError, ValueError):
    pass
