"""Exception types raised by fisherlat.

Every error carries an ``exit_code`` so the CLI can map failures to the
documented process status without inspecting messages.
"""


class FisherlatError(Exception):
    exit_code = 3


class ConfigError(FisherlatError):
    exit_code = 2


class SchemaError(FisherlatError):
    """An input file does not match its documented layout."""
    exit_code = 2

    def __init__(self, path, line_no: int, line: str, reason: str):
        self.path = str(path)
        self.line_no = line_no
        self.line = line
        super().__init__(f"{self.path}:{line_no}: {reason} (line: {line!r})")


class DomainError(FisherlatError, ValueError):
    """A numeric argument lies outside the documented domain."""


class SamplerError(FisherlatError):
    def __init__(self, cell: int, point, reason: str):
        self.cell = cell
        self.point = tuple(float(p) for p in point)
        super().__init__(f"sampler failed at cell {cell} t={self.point}: {reason}")


class ConvergenceError(FisherlatError):
    def __init__(self, message: str, iteration: int = None):
        self.iteration = iteration
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)


class TrajectoryEscape(FisherlatError):
    """An ODE trajectory left its window; ``partial`` holds the steps computed so far."""

    def __init__(self, message: str, partial):
        self.partial = partial
        super().__init__(message)


class StageError(FisherlatError):
    exit_code = 3

    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
