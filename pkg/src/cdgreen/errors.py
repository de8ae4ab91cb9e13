"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class CDGreenError(Exception):
    """Base class for all package errors."""


class ConfigurationError(CDGreenError):
    """Invalid user input: bad config keys, empty sweeps, malformed points."""


class CoefficientEvaluationError(CDGreenError):
    """A coefficient evaluator returned a non-finite value.

    Attributes
    ----------
    point : numpy.ndarray
        The first offending evaluation point.
    name : str
        Name of the coefficient field.
    """

    def __init__(self, name, point):
        self.name = name
        self.point = point
        super().__init__(f"coefficient {name!r} is not finite at point {tuple(point)}")


class SingularityError(CDGreenError):
    """Evaluation requested at (or numerically at) the kernel singularity."""


class CutoffDomainError(CDGreenError, ValueError):
    """Cut-off function evaluated outside [0, 1]."""


class NumericalError(CDGreenError):
    """Base for failures of a numerical procedure (quadrature, linear solver)."""


class DivergenceError(NumericalError):
    """The integrand is not integrable near the singular point.

    Attributes
    ----------
    shell_values : list of float
        Contributions of successive dyadic shells approaching the singularity.
    """

    def __init__(self, message, shell_values=()):
        self.shell_values = list(shell_values)
        super().__init__(message)


class BudgetError(NumericalError):
    """The evaluation budget was exhausted before reaching the tolerance.

    Attributes
    ----------
    partial : object
        The best available result (a ``QuadResult``) at the time of abort.
    """

    def __init__(self, message, partial=None):
        self.partial = partial
        super().__init__(message)


class SolverError(NumericalError):
    """Iterative linear solver failed to reach the requested residual.

    Attributes
    ----------
    history : list of float
        Relative residual history.
    """

    def __init__(self, message, history=()):
        self.history = list(history)
        super().__init__(message)


class MeshBudgetError(CDGreenError):
    """Requested mesh exceeds the configured node budget."""
