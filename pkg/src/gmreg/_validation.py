"""Input validation helpers shared by the estimators and the functional API."""

import numpy as np
from sklearn.utils import check_array


def check_points(X, name="points", min_points=0):
    """Return ``X`` as a C-contiguous float64 ``(n, 3)`` array."""
    X = check_array(
        X, dtype=np.float64, ensure_2d=True, ensure_min_samples=0,
        input_name=name,
    )
    if X.shape[1] != 3:
        raise ValueError(f"{name} must have shape (n, 3), got {X.shape}")
    if X.shape[0] < min_points:
        raise ValueError(f"{name} needs at least {min_points} points, got {X.shape[0]}")
    return np.ascontiguousarray(X)


def check_matrix(A, name="matrix", shape=None):
    A = check_array(
        A, dtype=np.float64, ensure_2d=True, ensure_min_samples=1,
        ensure_min_features=1, input_name=name,
    )
    if shape is not None and A.shape != tuple(shape):
        raise ValueError(f"{name} has shape {A.shape}, expected {tuple(shape)}")
    return A


def check_features(F, n, name="features"):
    F = check_array(F, dtype=np.float64, ensure_2d=True, ensure_min_samples=0, input_name=name)
    if F.shape[0] != n:
        raise ValueError(f"{name} has {F.shape[0]} rows, expected {n}")
    return F


def check_unit_interval(x, name="scores"):
    x = np.asarray(x, dtype=np.float64).ravel()
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} must be finite")
    if np.any(x < 0.0) or np.any(x > 1.0):
        raise ValueError(f"{name} must lie in [0, 1]")
    return x


def check_positive(value, name):
    value = float(value)
    if not np.isfinite(value) or value <= 0.0:
        raise ValueError(f"{name} must be > 0, got {value}")
    return value
