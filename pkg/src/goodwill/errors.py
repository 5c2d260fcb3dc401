"""Exception and warning types shared across the package."""


class GoodwillError(Exception):
    """Base class for every error raised by this package."""


class ModelError(GoodwillError, ValueError):
    """A model, control or cost specification violates a standing assumption.

    ``hypothesis`` names the assumption in words, e.g. ``"grid-aligned delay"``.
    """

    hypothesis = "model assumption"

    def __init__(self, message, hypothesis=None):
        super().__init__(message)
        if hypothesis is not None:
            self.hypothesis = hypothesis


class DelayNotGridAligned(ModelError):
    hypothesis = "grid-aligned delay"


class NonPositiveDelay(ModelError):
    hypothesis = "positive delay"


class DelayExceedsHorizon(ModelError):
    hypothesis = "delay shorter than horizon"


class EmptyControlSet(ModelError):
    hypothesis = "non-empty bounded control set"


class NonConvexCost(ModelError):
    hypothesis = "convex advertising cost"


class NonIncreasingTerminalReward(ModelError):
    hypothesis = "increasing terminal reward"


class ExcessiveRewardGrowth(ModelError):
    hypothesis = "running reward with at most linear growth"


class TabulatedCostOffGrid(ModelError):
    hypothesis = "cost evaluated on the control set"


class WindowOutOfRange(ModelError):
    hypothesis = "spike window inside the horizon"


class WindowNotAligned(ModelError):
    hypothesis = "grid-aligned spike window"


class GridMismatch(GoodwillError, ValueError):
    """Two objects that must share a time grid do not."""


class StartOffGrid(GoodwillError, ValueError):
    """A start time is not a grid node."""


class BudgetExceeded(GoodwillError, RuntimeError):
    """A requested Monte Carlo effort exceeds the configured cap."""


class EnumerationCapExceeded(GoodwillError, RuntimeError):
    """The scenario tree is too large to enumerate."""


class EpsilonNotAligned(GoodwillError, ValueError):
    """A spike width is not an integer number of grid steps."""


class RankDeficientBasis(UserWarning):
    """A regression basis was singular; a ridge penalty was applied."""


class RegressionQualityBelowFloor(UserWarning):
    """A conditional-expectation regression fell below the R^2 floor."""


class ConfigError(GoodwillError, ValueError):
    """Base class for configuration problems. ``key_path`` is dotted."""

    def __init__(self, message, key_path=""):
        super().__init__(f"{key_path}: {message}" if key_path else message)
        self.key_path = key_path


class ParseError(ConfigError):
    pass


class UnknownKey(ConfigError):
    pass


class MissingRequired(ConfigError):
    pass


class ConstraintViolation(ConfigError):
    pass
