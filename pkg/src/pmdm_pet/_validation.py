"""Input checks shared by the estimator classes."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array


def check_stack(X, name: str, shape: tuple[int, int] | None = None, dtype=np.float64) -> np.ndarray:
    """Validate an ``(n, H, W)`` stack; a single 2-d array is promoted."""
    X = np.asarray(X)
    if X.ndim == 2:
        X = X[None]
    X = check_array(X, allow_nd=True, dtype=dtype, ensure_all_finite=True, input_name=name)
    if X.ndim != 3:
        raise ValueError(f"{name} must be a stack of 2-d arrays, got shape {X.shape}")
    if shape is not None and X.shape[1:] != tuple(shape):
        raise ValueError(f"{name} has per-sample shape {X.shape[1:]}, expected {tuple(shape)}")
    return X


def check_sinograms(X, shape=None) -> np.ndarray:
    X = check_stack(X, "sinograms", shape)
    if (X < 0).any():
        raise ValueError("sinograms must be nonnegative")
    return X


def check_images(X, shape=None) -> np.ndarray:
    return check_stack(X, "images", shape)


def check_same_length(*arrays) -> None:
    lengths = {len(a) for a in arrays}
    if len(lengths) > 1:
        raise ValueError(f"inconsistent sample counts: {sorted(lengths)}")
