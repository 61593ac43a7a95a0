"""Exception hierarchy shared by all modules."""


class TubeOxError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 3


class ConfigError(TubeOxError):
    exit_code = 2


class ParseError(TubeOxError):
    exit_code = 4

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class TagError(TubeOxError):
    exit_code = 4


class TopologyError(TubeOxError):
    pass


class GeometryError(TubeOxError):
    pass


class EmptySelectionError(TubeOxError):
    pass


class SelectionError(TubeOxError):
    pass


class ResolutionError(TubeOxError):
    exit_code = 2


class BudgetError(TubeOxError):
    pass


class SingularElementError(TubeOxError):
    def __init__(self, element):
        self.element = element
        super().__init__(f"degenerate Jacobian in element {element}")


class ConstraintError(TubeOxError):
    pass


class SolverError(TubeOxError):
    pass


class SingularMatrixError(SolverError):
    def __init__(self, message, pivot=None):
        self.pivot = pivot
        super().__init__(message)


class NonConvergenceError(SolverError):
    def __init__(self, message, report=None):
        self.report = report
        super().__init__(message)


class StepRejectedError(SolverError):
    def __init__(self, message, report=None):
        self.report = report
        super().__init__(message)


class AlignmentError(TubeOxError):
    pass


class OutputError(TubeOxError):
    exit_code = 4
