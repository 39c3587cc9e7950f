"""Exception types shared across the package."""


class ContractError(ValueError):
    """An input violated a documented precondition (shape, simplex, ...)."""


class NotReadyError(RuntimeError):
    """The memory bank does not yet hold enough epochs to answer a query."""


class NumericError(FloatingPointError):
    """A computation produced NaN or inf."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""
