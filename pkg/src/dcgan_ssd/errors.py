"""Exception types shared across the package.

The CLI maps these onto exit codes, so modules raise them instead of bare
``ValueError`` wherever the failure class matters to a caller.
"""


class DataValidationError(ValueError):
    """Input data violates a documented invariant (bad box, bad image size...)."""


class ShapeError(ValueError):
    """Tensor or architecture shapes do not line up."""


class NumericalError(ArithmeticError):
    """A computation produced or would produce a non-finite value."""
