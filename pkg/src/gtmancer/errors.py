"""Exception hierarchy shared by every gtmancer module."""


class GTMancerError(Exception):
    """Base class for all library errors."""


class ShapeError(GTMancerError, ValueError):
    pass


class ContractError(GTMancerError, ValueError):
    pass


class ParameterError(GTMancerError, ValueError):
    pass


class GraphError(GTMancerError):
    pass


class EvaluationError(GTMancerError, ArithmeticError):
    pass


class DegenerateError(GTMancerError, ArithmeticError):
    pass


class SingularityError(GTMancerError, ArithmeticError):
    pass


class ConvergenceError(GTMancerError, ArithmeticError):
    """An iterative routine hit its iteration cap.

    ``last`` carries whatever the routine had when it stopped (an iterate,
    a report, or both).
    """

    def __init__(self, message, last=None):
        super().__init__(message)
        self.last = last


class DivergenceError(GTMancerError, ArithmeticError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class DataError(GTMancerError, ValueError):
    pass


class AlignmentError(DataError):
    def __init__(self, message, missing=()):
        super().__init__(message)
        self.missing = tuple(missing)


class ParseError(DataError):
    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class FormatError(DataError):
    pass


class SpecError(DataError):
    pass


class StratificationError(DataError):
    pass


class DigestMismatchError(GTMancerError):
    pass
