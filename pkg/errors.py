"""
Exceptions shared by the reconstruction modules
"""
from typing import Optional


class EitError(Exception):
    """Base class for every error raised by this package"""
    def __init__(self, message: str):
        self.message = message
        super().__init__(self.message)


class ConfigurationError(EitError):
    """Invalid parameters, electrode layouts, patterns or schedules"""


class ValidationError(EitError):
    """Input data (mesh, phantom, dataset, image) violates an invariant"""


class ParseError(ValidationError):
    """A file could not be parsed; carries the offending location"""
    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        self.path = path
        self.line = line
        where = ''
        if path:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(where + message)


class MeshConnectivityError(ValidationError):
    """Interior nodes not connected to the boundary (L^T L is singular)"""


class DomainError(EitError):
    """Argument outside the mathematical domain of an operation"""


class NumericalError(EitError):
    """Factorization or iterative solver failure"""
    def __init__(self, message: str, index: Optional[int] = None, details: Optional[dict] = None):
        self.index = index
        self.details = details or {}
        if index is not None:
            message = f"{message} (component {index})"
        super().__init__(message)
