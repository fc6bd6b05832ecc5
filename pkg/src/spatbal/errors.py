"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ValidationError -> 2,
DegenerateError -> 3, InfeasibleError -> 4.
"""


class ValidationError(ValueError):
    """Invalid input data, file, configuration, or precondition."""


class DegenerateError(ArithmeticError):
    """Numerical degeneracy: collinear design, singular KKT system, non-PSD matrix."""


class InfeasibleError(RuntimeError):
    """The feasible region of a constrained problem is (numerically) empty."""
