"""Exception types shared across the package.

The CLI maps these onto exit codes: usage errors exit 1, ValidationError
(and other ValueError) exit 2, numerical failures exit 3.
"""


class ValidationError(ValueError):
    """Invalid input data or configuration."""


class InfeasibleCropError(ValidationError):
    """No crop rectangle satisfies the configured area/aspect constraints."""


class NumericalError(RuntimeError):
    """Numerical failure (divergence, failed gradient verification)."""


class DivergenceError(NumericalError):
    """Non-finite loss or gradients during training."""


class GradientCheckError(NumericalError):
    """Analytic gradient disagrees with finite differences."""
