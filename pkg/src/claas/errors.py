"""Exception hierarchy shared across the package.

Every error carries a short ``code`` string; the REST layer uses it verbatim
as the ``error`` member of its response body.
"""

from __future__ import annotations


class ClaasError(Exception):
    code = "Error"

    def __init__(self, detail: str = "", *, code: str | None = None, field: str | None = None):
        super().__init__(detail or self.code)
        self.detail = detail or self.code
        if code is not None:
            self.code = code
        self.field = field


class DimensionError(ClaasError, ValueError):
    code = "DimensionError"


class LabelError(ClaasError, ValueError):
    code = "LabelError"

    def __init__(self, detail: str = "", *, line: int | None = None, **kw):
        super().__init__(detail, **kw)
        self.line = line


class RangeError(ClaasError, IndexError):
    code = "RangeError"


class ParseError(ClaasError, ValueError):
    code = "ParseError"

    def __init__(self, detail: str = "", *, line: int | None = None, **kw):
        super().__init__(detail, **kw)
        self.line = line


class FormatError(ClaasError, ValueError):
    code = "FormatError"


class InsufficientClasses(ClaasError, ValueError):
    code = "InsufficientClasses"


class EmptyExperience(ClaasError, ValueError):
    code = "EmptyExperience"


class ConfigError(ClaasError, ValueError):
    code = "ConfigError"


class EmptyBatch(ClaasError, ValueError):
    code = "EmptyBatch"


class JobStateError(ClaasError, RuntimeError):
    code = "JobStateError"


class AggregateError(ClaasError, ValueError):
    code = "AggregateError"


class WindowError(ClaasError, ValueError):
    code = "WindowError"


class BinError(ClaasError, ValueError):
    code = "BinError"


class DataError(ClaasError, ValueError):
    code = "DataError"


class NotFound(ClaasError, LookupError):
    code = "NotFound"


class StorageError(ClaasError, OSError):
    code = "StorageError"


class InvalidKey(ClaasError, KeyError):
    """Storage key rejected by the traversal guard."""

    code = "InvalidKey"

    def __str__(self) -> str:  # KeyError quotes its argument otherwise
        return self.detail


class Conflict(ClaasError):
    code = "Conflict"
