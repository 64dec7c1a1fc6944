"""Exception hierarchy shared across the package."""


class MKGError(Exception):
    """Base class for all package errors."""


class ShapeError(MKGError, ValueError):
    pass


class VocabularyError(MKGError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class LengthError(MKGError, ValueError):
    pass


class TargetError(MKGError, ValueError):
    pass


class NumericError(MKGError, ArithmeticError):
    pass


class StateError(MKGError, RuntimeError):
    pass


class ParseError(MKGError, ValueError):
    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(where + message)
        self.line = line
        self.path = path


class LabelError(ParseError):
    pass


class InputError(MKGError, ValueError):
    pass
