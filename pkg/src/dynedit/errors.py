"""Exception types shared across the package.

Plain ValueError is used for ordinary invalid arguments; the classes here
mark conditions callers may want to handle separately (and that the CLI
maps to distinct exit codes).
"""


class DegenerateInputError(ValueError):
    """Input is structurally valid but numerically degenerate (zero-norm map, empty mask, ...)."""


class NotFoundError(LookupError):
    """A requested record (e.g. attention at a resolution) does not exist."""


class NumericalFailureError(RuntimeError):
    """An optimization or numerical routine produced non-finite values."""
