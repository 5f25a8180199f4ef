"""Error taxonomy for the toolkit.

The groups map onto the exit codes of the ``sltmpc`` management command:
``Infeasible`` -> 1, ``ConfigError`` -> 2, everything else -> 3.
"""


class SltmpcError(Exception):
    """Base class for every error raised by the toolkit"""


# Geometry

class GeometryError(SltmpcError):
    pass


class DimensionMismatch(GeometryError, ValueError):
    pass


class Unbounded(GeometryError):
    pass


class EmptyResult(GeometryError):
    pass


class NotTwoDimensional(GeometryError):
    pass


class NotConverged(GeometryError):
    pass


class Unstable(GeometryError):
    pass


# System responses

class ResponseError(SltmpcError):
    pass


class ValidationFailed(ResponseError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class FirRequired(ResponseError):
    pass


class WrongHistoryLength(ResponseError):
    pass


# Optimization

class Infeasible(SltmpcError):
    pass


class ControllerInfeasible(Infeasible):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class SolverError(SltmpcError):
    pass


class SolverInaccurate(SolverError):
    def __init__(self, message, kkt=None):
        super().__init__(message)
        self.kkt = kkt or {}


class BackendCapability(SolverError):
    pass


class NotConvex(SolverError, ValueError):
    pass


class DesignError(SltmpcError):
    pass


class UnsupportedTerminal(DesignError):
    pass


class UnsupportedKind(DesignError):
    pass


class NotStabilizable(DesignError):
    pass


# Configuration

class ConfigError(SltmpcError):
    pass


class ParseError(ConfigError):
    def __init__(self, message, line=None, column=None):
        location = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(f"{message}{location}")
        self.line = line
        self.column = column


class SchemaError(ConfigError):
    def __init__(self, field, message=""):
        super().__init__(f"{field}: {message}" if message else field)
        self.field = field
