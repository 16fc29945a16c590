"""Small input-validation helpers shared across the package."""

from __future__ import annotations

import numpy as np


def require(condition: bool, message: str):
    """Raise ValueError with ``message`` unless ``condition`` holds."""
    if not condition:
        raise ValueError(message)


def check_state_array(X, name: str = "X") -> np.ndarray:
    """Coerce to a finite (n_samples, d) float64 array."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    require(X.ndim == 2, f"{name} must be a 2D array, got shape {X.shape}")
    require(X.shape[0] > 0, f"{name} is empty")
    require(np.isfinite(X).all(), f"{name} contains non-finite values")
    return X


def check_vector(x, dim: int | None = None, name: str = "x") -> np.ndarray:
    """Coerce to a finite 1D float64 vector, optionally of fixed dimension."""
    x = np.asarray(x, dtype=np.float64).ravel()
    require(np.isfinite(x).all(), f"{name} contains non-finite values")
    if dim is not None:
        require(x.shape[0] == dim, f"{name} must have dimension {dim}, got {x.shape[0]}")
    return x
