"""Exception hierarchy shared by all rbn modules."""


class RbnError(Exception):
    """Base class for all errors raised by this package."""


class ModelSyntaxError(RbnError):
    """Raised when model text violates the grammar."""

    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        if line is not None:
            message = f"{message} (line {line}, column {column})"
        super().__init__(message)


class ModelError(RbnError):
    """Semantic problem in a model: undeclared names, arity clashes, bad guards."""


class DataError(RbnError):
    """Problem in a dataset file or in dataset/model reconciliation."""


class GraphError(RbnError):
    """Problem while compiling or evaluating a likelihood graph."""


class NumericalError(RbnError):
    """Numerical failure: probability out of [0,1], non-finite gradient, etc."""
