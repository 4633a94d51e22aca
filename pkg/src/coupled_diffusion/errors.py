"""Exception types shared across the package.

The CLI maps each class to its own exit code, so raise the most specific one.
"""


class ShapeError(ValueError):
    """Array dimensions do not match what an operation expects."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf escaped a public operation."""


class ConfigError(ValueError):
    """Invalid or incomplete experiment / run configuration."""


class StaleTapeError(RuntimeError):
    """Backward pass called with a tape from another forward pass."""


class CheckpointError(IOError):
    """Missing, truncated, or version-mismatched checkpoint file."""


class TrainingDivergedError(RuntimeError):
    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


def check_finite(name, arr):
    import numpy as np

    arr = np.asarray(arr)
    if not np.all(np.isfinite(arr)):
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise NonFiniteError(f"{name}: {bad} non-finite entries out of {arr.size}")
    return arr
