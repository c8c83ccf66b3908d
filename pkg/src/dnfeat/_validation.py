"""Exception types and input checks shared across the package."""

from __future__ import annotations

import numpy as np


class DNFError(Exception):
    """Base class for errors raised by this package."""


class ParameterError(DNFError, ValueError):
    pass


class TrainingError(DNFError, RuntimeError):
    pass


class MetricError(DNFError, ValueError):
    pass


class TransportError(DNFError, RuntimeError):
    pass


class FormatError(DNFError, ValueError):
    pass


class StageError(DNFError, RuntimeError):
    pass


def check_images(X, *, ndim=3, dtype=np.float64, name="X") -> np.ndarray:
    """Validate a stack of single-channel images shaped ``(n, H, W)``.

    A single 2-D image is promoted to a stack of one.
    """
    X = np.asarray(X)
    if X.ndim == 2 and ndim == 3:
        X = X[None]
    if X.ndim != ndim:
        raise ParameterError(f"{name} must have {ndim} dimensions, got shape {X.shape}")
    if X.shape[0] == 0:
        raise ParameterError(f"{name} is empty")
    X = X.astype(dtype, copy=False)
    if not np.all(np.isfinite(X)):
        raise ParameterError(f"{name} contains non-finite values")
    return X


def check_binary_labels(y, n=None, name="y") -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1:
        raise ParameterError(f"{name} must be 1-D")
    if n is not None and y.shape[0] != n:
        raise ParameterError(f"{name} has {y.shape[0]} entries, expected {n}")
    if not np.all((y == 0) | (y == 1)):
        raise ParameterError(f"{name} must contain only 0/1 labels")
    return y.astype(np.int64)


def check_random_seed(seed) -> int:
    if seed is None:
        return 0
    if int(seed) != seed or seed < 0:
        raise ParameterError(f"seed must be a non-negative integer, got {seed!r}")
    return int(seed)
