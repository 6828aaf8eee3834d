"""Input validation helpers in the spirit of ``sklearn.utils.validation``."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .geometry import is_rotation


def check_vectors(X, dim: int = 3, name: str = "X", min_samples: int = 1) -> np.ndarray:
    """Finite float array of shape ``(n, dim)``; a single vector is promoted to ``(1, dim)``."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    X = check_array(X, dtype=float, ensure_min_samples=min_samples, input_name=name)
    if X.shape[1] != dim:
        raise ValueError(f"{name} must have {dim} columns, got {X.shape[1]}")
    return X


def check_unit_vectors(X, name: str = "X", tol: float = 1e-6, min_samples: int = 0) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.size == 0:
        if min_samples > 0:
            raise ValueError(f"{name} is empty")
        return X.reshape(0, 3)
    X = check_vectors(X, 3, name, max(min_samples, 1))
    norms = np.linalg.norm(X, axis=1)
    if np.any(np.abs(norms - 1.0) > tol):
        raise ValueError(f"{name} must contain unit vectors")
    return X


def check_rotation(R, name: str = "R") -> np.ndarray:
    R = getattr(R, "matrix", R)
    R = np.asarray(R, dtype=float)
    if not is_rotation(R):
        raise ValueError(f"{name} is not a rotation matrix")
    return R


def check_paired_points(A, B, min_pairs: int = 1):
    A = check_vectors(A, 3, "est", min_pairs)
    B = check_vectors(B, 3, "gt", min_pairs)
    if A.shape != B.shape:
        raise ValueError(f"point sets differ in shape: {A.shape} vs {B.shape}")
    return A, B
