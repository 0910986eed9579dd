"""Exception types shared across the package."""


class DataError(ValueError):
    """Bad or incompatible input data: missing files, dimension mismatches,
    malformed binary containers, sequences longer than the padded length."""


class NumericalError(RuntimeError):
    """Non-finite values where finite ones are required: NaN/Inf loss or
    gradients, fully masked softmax rows."""
