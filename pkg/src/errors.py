"""
Depth-aware CNN toolkit - error types
Every error carries the process exit code the CLI returns for it.
"""

from typing import Optional


class DcnnError(Exception):
    """Base class for all toolkit errors"""
    exit_code = 1

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message


class UsageError(DcnnError):
    exit_code = 2


class ArgumentError(UsageError):
    """Invalid scalar argument (ranges, counts, rates)"""


class ShapeError(UsageError):
    """Tensor shapes or dimensions that do not fit the operation"""


class SpecError(UsageError):
    """Invalid layer/model/dataset description"""


class GraphError(UsageError):
    """Malformed computation graph (cycles, unknown nodes)"""


class StateError(UsageError):
    """Operation called in the wrong state (backward before forward, optimizer shape drift)"""


class DataError(DcnnError):
    exit_code = 3


class FormatError(DataError):
    """Malformed or truncated image file"""

    def __init__(self, message: str, offset: int, path: Optional[str] = None):
        where = f"{path}@{offset}" if path else f"byte {offset}"
        super().__init__(f"{message} ({where})")
        self.offset = offset
        self.path = path


class DatasetIOError(DataError):
    """Filesystem failure, always reported with the offending path"""

    def __init__(self, message: str, path: str):
        super().__init__(f"{message}: {path}")
        self.path = path


class UndefinedMetricError(DataError):
    """Metric requested on an empty confusion matrix"""


class NumericalCheckError(DcnnError):
    """Gradient check or acceptance threshold failed"""
    exit_code = 4
