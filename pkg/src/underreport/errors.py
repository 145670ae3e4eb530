class DataValidationError(ValueError):
    """Input data or configuration violates a documented contract."""


class NumericalError(RuntimeError):
    """The sampler reached a non-finite or inconsistent state."""
