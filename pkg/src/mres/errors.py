"""Exception hierarchy shared across the package."""


class MresError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatch(MresError, ValueError):
    pass


class SumMismatch(MresError, ValueError):
    """RLE counts do not add up to width * height."""


class InvalidRle(MresError, ValueError):
    pass


class EmptyEvaluation(MresError, ValueError):
    pass


class DegenerateUnion(MresError, ZeroDivisionError):
    """Total union over an evaluation set is zero, so oIoU is undefined."""


class SchemaError(MresError, ValueError):
    def __init__(self, message, *, line=None, field=None):
        self.reason = message
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)


class MissingImage(MresError, FileNotFoundError):
    pass


class EmptyExpression(MresError, ValueError):
    pass


class InvalidBox(MresError, ValueError):
    pass


class EmptyName(MresError, ValueError):
    pass


class BackendError(MresError, RuntimeError):
    """An engine backend failed or returned a malformed result."""


class NonFiniteLoss(MresError, FloatingPointError):
    pass


class CheckpointMismatch(MresError, ValueError):
    pass
