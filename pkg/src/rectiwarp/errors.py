"""Exception types shared across the toolkit."""


class RectiwarpError(Exception):
    pass


class InvalidArgumentError(RectiwarpError, ValueError):
    pass


class NoConvergenceError(RectiwarpError, ArithmeticError):
    pass


class DegenerateError(RectiwarpError, ValueError):
    """Raised for singular TPS systems, rank-deficient fits and empty masks."""
