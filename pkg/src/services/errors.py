from typing import Any, Dict, Optional


class LogicTreeError(Exception):
    """Base class for every error raised by the library."""


class ConfigError(LogicTreeError):
    pass


class DatasetError(LogicTreeError):
    """Invalid dataset file or dataset operation.

    Args:
        code: Stable machine-readable error code (e.g. "label-not-target")
        message: Human-readable description
        location: Where in the file the problem is: a character offset for
            JSON syntax errors, a JSON path like "sequences[3].events[1]" otherwise
    """

    def __init__(self, code: str, message: str, location: Optional[str] = None):
        self.code = code
        self.location = location
        where = f" at {location}" if location is not None else ""
        super().__init__(f"{code}{where}: {message}")


class TreeError(LogicTreeError):
    pass


class SpaceTooLargeError(LogicTreeError):
    pass


class SimulationError(LogicTreeError):
    pass


class EvaluationError(LogicTreeError):
    pass


class RemoteAdapterError(LogicTreeError):
    pass


class DivergenceError(LogicTreeError):
    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)
