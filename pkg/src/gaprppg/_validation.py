"""Input validation helpers shared by the numpy-side modules."""

from __future__ import annotations

import numpy as np


class ValidationError(ValueError):
    """Raised when an input violates a documented precondition."""


class NumericalError(RuntimeError):
    """Raised on NaN/Inf losses, divergence or failed decompositions."""


class DegenerateSignalError(ValueError):
    """Raised when a signal carries no usable variation (flat, constant)."""


def check_series(x, *, min_length: int = 1, name: str = "series") -> np.ndarray:
    """Return ``x`` as a finite float64 1-D array of at least ``min_length``."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ValidationError(f"{name} must be 1-D, got shape {arr.shape}")
    if arr.size < min_length:
        raise ValidationError(f"{name} needs at least {min_length} samples, got {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    return arr


def check_positive(value, name: str) -> float:
    value = float(value)
    if not np.isfinite(value) or value <= 0:
        raise ValidationError(f"{name} must be a positive finite number, got {value}")
    return value


def check_range(value, lo: float, hi: float, name: str) -> float:
    value = float(value)
    if not (lo <= value <= hi):
        raise ValidationError(f"{name}={value} outside [{lo}, {hi}]")
    return value


def check_stmap_array(x, *, min_rows: int = 1, min_length: int = 1) -> np.ndarray:
    """Validate a T x W x 3 map and return it as float64.

    Accepts anything with a ``data`` attribute (an :class:`~gaprppg.stmap.STMap`)
    or a plain array.
    """
    data = getattr(x, "data", x)
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValidationError(f"expected a T x W x 3 map, got shape {arr.shape}")
    if arr.shape[0] < min_length:
        raise ValidationError(f"map needs T >= {min_length}, got {arr.shape[0]}")
    if arr.shape[1] < min_rows:
        raise ValidationError(f"map needs W >= {min_rows}, got {arr.shape[1]}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("map contains non-finite values")
    return arr


def check_random_state(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
