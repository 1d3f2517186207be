"""Small input-validation helpers shared by the model, predictor and analysis code."""

import numpy as np


def as_matrix(value, name, shape=None, dtype=float):
    """Coerce ``value`` to a 2-D float array, promoting scalars and vectors.

    Scalars become 1x1, 1-D arrays become columns. ``shape`` entries that are
    ``None`` are not checked.
    """
    arr = np.array(value, dtype=dtype)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    elif arr.ndim > 2:
        raise ValueError(f"{name} must be at most 2-D, got shape {arr.shape}")
    if shape is not None:
        for axis, (got, want) in enumerate(zip(arr.shape, shape)):
            if want is not None and got != want:
                raise ValueError(
                    f"{name} has shape {arr.shape}, expected {tuple(shape)} (axis {axis})"
                )
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def as_vector(value, name, size=None):
    arr = np.array(value, dtype=float).reshape(-1)
    if size is not None and arr.size != size:
        raise ValueError(f"{name} has {arr.size} entries, expected {size}")
    return arr


def check_square(arr, name):
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ValueError(f"{name} must be square, got shape {arr.shape}")
    return arr


def check_symmetric(arr, name, tol=1e-10):
    check_square(arr, name)
    scale = max(1.0, float(np.max(np.abs(arr))) if arr.size else 1.0)
    if np.max(np.abs(arr - arr.T), initial=0.0) > tol * scale:
        raise ValueError(f"{name} is not symmetric")
    return arr


def check_positive(value, name, strict=True):
    value = float(value)
    if not np.isfinite(value) or value < 0 or (strict and value == 0):
        bound = "> 0" if strict else ">= 0"
        raise ValueError(f"{name} must be {bound}, got {value}")
    return value


def check_int_range(value, name, lo=None, hi=None):
    if isinstance(value, bool) or int(value) != value:
        raise ValueError(f"{name} must be an integer, got {value!r}")
    value = int(value)
    if lo is not None and value < lo:
        raise ValueError(f"{name}={value} below lower bound {lo}")
    if hi is not None and value > hi:
        raise ValueError(f"{name}={value} above upper bound {hi}")
    return value
