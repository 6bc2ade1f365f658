"""Exception types shared across the engine."""
from __future__ import annotations

from typing import Optional


class SparseDerfError(Exception):
    """Base class for engine errors."""
    pass


class DomainError(SparseDerfError):
    """Raised when an operation is applied outside its mathematical domain."""
    pass


class NumericError(SparseDerfError):
    """Raised when a forward value or adjoint becomes non-finite."""

    def __init__(self, message: str, node_id: Optional[int] = None):
        super().__init__(message)
        self.node_id = node_id


class InvariantError(SparseDerfError):
    """Raised when a documented invariant is violated by the caller."""
    pass


class GeometryError(SparseDerfError):
    """Raised for invalid poses or rays."""
    pass


class DegenerateGeometry(GeometryError):
    """Raised when a least-squares geometric problem is rank deficient."""
    pass


class ManifestError(SparseDerfError):
    """Raised when a scene manifest or its images are inconsistent."""
    pass


class TrainingAborted(NumericError):
    """Raised by the trainer after writing a diagnostic dump."""

    def __init__(self, message: str, node_id: Optional[int] = None, dump_path: Optional[str] = None):
        super().__init__(message, node_id)
        self.dump_path = dump_path
