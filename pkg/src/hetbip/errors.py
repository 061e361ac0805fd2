class HetbipError(Exception):
    """Base class for package errors."""


class DataError(HetbipError):
    """Malformed or inconsistent input data."""


class ParseError(DataError):
    def __init__(self, path, lineno, message):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = path
        self.lineno = lineno


class ReferentialIntegrityError(DataError):
    pass


class DuplicateEdgeError(DataError):
    pass


class BipartiteViolationError(DataError):
    pass


class NumericalError(HetbipError):
    """Training produced a non-finite value."""
