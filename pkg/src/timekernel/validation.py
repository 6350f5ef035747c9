"""Input checks and the exception types shared across the package."""

from __future__ import annotations

import numpy as np


class InputError(ValueError):
    """Caller supplied data that violates an operation's preconditions."""


class ConfigError(ValueError):
    """Hyperparameters are inconsistent or out of range."""


class SpecError(ValueError):
    """A kernel specification fails its structural requirements."""


class NumericalError(FloatingPointError):
    """Training produced non-finite values."""


class CheckpointError(ValueError):
    """A checkpoint file is unreadable or does not match the model config."""


class NotFittedError(AttributeError):
    """Estimator used before ``fit``."""


def check_times(t, *, name: str = "t", allow_negative: bool = True) -> np.ndarray:
    """Return ``t`` as a float64 array, rejecting NaN/Inf (and negatives if asked)."""
    arr = np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{name} must be finite")
    if not allow_negative and np.any(arr < 0):
        raise InputError(f"{name} must be non-negative")
    return arr


def check_grid(grid, *, name: str = "grid") -> np.ndarray:
    arr = check_times(grid, name=name).reshape(-1)
    if arr.size == 0:
        raise InputError(f"{name} must be non-empty")
    return arr


def check_positive(**values) -> None:
    for key, v in values.items():
        if not np.isfinite(v) or v <= 0:
            raise InputError(f"{key} must be positive, got {v!r}")


def check_is_fitted(est, attr: str = "params_") -> None:
    if not hasattr(est, attr):
        raise NotFittedError(f"{type(est).__name__} is not fitted yet; call fit() first")
