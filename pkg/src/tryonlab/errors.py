"""Exception types shared across the package.

Argument validation raises the builtin ``ValueError``; the classes here
cover failure modes that callers may want to distinguish from bad
arguments.
"""


class InvalidStateError(RuntimeError):
    """An operation was applied to an object in the wrong state."""


class NumericFailure(ArithmeticError):
    """A computation produced non-finite values.

    ``context`` optionally identifies where the failure occurred, e.g.
    the sampler step index.
    """

    def __init__(self, message, context=None):
        super().__init__(message)
        self.context = context


class DivergenceError(RuntimeError):
    """A training run exceeded its divergence guard and was aborted."""


class FormatError(ValueError):
    """A tensor container file is malformed or truncated."""
