"""Exception hierarchy shared by all modules."""


class SrdChanceError(Exception):
    """Base class for all errors raised by this package."""


class InvalidGridError(SrdChanceError, ValueError):
    pass


class GridMismatchError(SrdChanceError, ValueError):
    """An operator was requested on a grid of the wrong problem kind."""


class DefinitenessError(SrdChanceError, ArithmeticError):
    """A factorization met a non-positive pivot (operator not SPD)."""


class TruncationError(SrdChanceError, ValueError):
    pass


class SlaterError(SrdChanceError, ValueError):
    """The mean state is not strictly inside the bounds at some point.

    Attributes
    ----------
    point : int
        Index (into the constraint points) of the worst violation.
    margin : float
        Signed distance to the nearest bound there (non-positive).
    """

    def __init__(self, message, point=None, margin=None):
        super().__init__(message)
        self.point = point
        self.margin = margin


class InfeasibleStartError(SrdChanceError, RuntimeError):
    pass


class ConfigError(SrdChanceError, ValueError):
    pass
