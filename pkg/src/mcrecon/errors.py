"""Exception types raised across the package."""


class McrError(Exception):
    """Base class for all package errors."""


class NonPositiveDisparity(McrError, ValueError):
    pass


class NonPositiveDepth(McrError, ValueError):
    pass


class DegenerateFit(McrError, ValueError):
    pass


class DegenerateConfiguration(McrError, ValueError):
    pass


class SingularSystem(McrError, ArithmeticError):
    pass


class MissingFlow(McrError, KeyError):
    pass


class ProviderFailure(McrError, RuntimeError):
    pass


class EmptyMask(McrError, ValueError):
    pass


class EmptyView(McrError, ValueError):
    pass


class NoValidPoints(McrError, ValueError):
    pass


class TooShort(McrError, ValueError):
    pass


class Divergence(McrError, RuntimeError):
    """Raised when a gradient phase blows up; carries phase/iteration context."""

    def __init__(self, phase, iteration, loss, initial):
        self.phase = phase
        self.iteration = iteration
        self.loss = loss
        self.initial = initial
        super().__init__(
            f"{phase} diverged at iteration {iteration}: loss {loss:.6g} > 10x initial {initial:.6g}"
        )


class InvalidConfig(McrError, ValueError):
    def __init__(self, field, message, line=None):
        self.field = field
        self.line = line
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"invalid config field '{field}'{where}: {message}")


class FormatError(McrError, ValueError):
    def __init__(self, path, message, offset=None):
        self.path = str(path)
        self.offset = offset
        at = f" at byte {offset}" if offset is not None else ""
        super().__init__(f"{self.path}{at}: {message}")


class StageFailure(McrError, RuntimeError):
    """A pipeline stage stopped; ``context`` says where (frame, phase, ...)."""

    def __init__(self, stage, context, cause=None):
        self.stage = stage
        self.context = context
        self.cause = cause
        detail = f": {cause}" if cause is not None else ""
        super().__init__(f"{stage} failed at {context}{detail}")
