"""Exception types raised across qremkit.

Non-convergence and variance collapse are reported as flags on fit
objects, not raised, so sweeps over quantile grids always complete.
"""


class QremError(Exception):
    """Base class for all qremkit errors."""


class DimensionMismatch(QremError, ValueError):
    pass


class RankDeficient(QremError, ValueError):
    pass


class InvalidParameter(QremError, ValueError):
    pass


class DegenerateSample(QremError, ValueError):
    pass


class DegenerateDensity(QremError, ValueError):
    pass


class EmptySide(QremError, ValueError):
    """One of the above/below residual sets is empty."""


class SparseLevel(QremError, ValueError):
    pass


class TooFewSuccessfulReps(QremError, RuntimeError):
    pass


class Saturated(QremError, RuntimeError):
    """Active set grew to n - 1 predictors."""


class InvalidStrategyParams(QremError, ValueError):
    pass


class InvalidScenario(QremError, ValueError):
    pass


class ParseError(QremError, ValueError):
    def __init__(self, msg, row=None, col=None):
        loc = []
        if row is not None:
            loc.append(f"row {row}")
        if col is not None:
            loc.append(f"column {col!r}")
        super().__init__(f"{msg} ({', '.join(loc)})" if loc else msg)
        self.row, self.col = row, col


class MissingValue(ParseError):
    pass


class EmptyData(QremError, ValueError):
    pass
