"""Exception families shared across the toolkit.

Each family maps to a distinct CLI exit code (see harness.cli).
"""


class OrderlabError(Exception):
    """Base class for all toolkit errors."""


class InvalidArgument(OrderlabError):
    """A precondition on an operation's inputs was violated."""


class NumericalFailure(OrderlabError):
    """An iterative or floating-point computation failed (NaN, non-convergence)."""


class DegenerateVector(OrderlabError):
    """A vector operation received a zero-norm argument."""


class DivergenceError(NumericalFailure):
    """An iterative solver left its stability region."""


class FormatError(OrderlabError):
    """An input file does not follow its documented format."""


class EmptyCorpus(OrderlabError):
    """Filtering removed every user or item."""


class EmptyCleanSet(OrderlabError):
    """No clean validation/training samples remain."""
