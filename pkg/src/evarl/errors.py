"""Exception types raised across the package."""


class DegenerateInputError(ValueError):
    """Input violates a structural assumption (e.g. a zero similarity sum)."""


class UnsupportedActionError(ValueError):
    """Behavior data contains an action the behavior policy could not take."""
