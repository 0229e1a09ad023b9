"""Exception hierarchy shared by every stage.

Each error carries the process exit code the CLI uses when it escapes a stage.
"""


class IssError(Exception):
    """Base class for all pipeline errors"""

    exit_code = 1


class MissingInputError(IssError, FileNotFoundError):
    """A stage input (file or earlier-stage artifact) does not exist"""

    exit_code = 2

    def __init__(self, path, hint: str = ""):
        self.path = str(path)
        message = f"Missing input: {self.path}"
        if hint:
            message += f" ({hint})"
        super().__init__(message)


class InvalidInputError(IssError, ValueError):
    """Malformed data, bad configuration or violated preconditions"""

    exit_code = 3


class DivergenceError(IssError, ArithmeticError):
    """A numeric update produced NaN or Inf"""

    exit_code = 4


class FactorizationError(DivergenceError):
    """The damped Hessian could not be Cholesky-factored"""
