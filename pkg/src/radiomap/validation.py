"""Input validation for estimator entry points."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .priors import CHANNELS


def check_stack(X, dtype=np.float64) -> np.ndarray:
    """Validate a batch of input stacks ``(N, 11, H, W)``; a single ``(11, H, W)`` stack is promoted."""
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    X = check_array(X, allow_nd=True, dtype=dtype, ensure_all_finite=True, ensure_min_features=1)
    if X.ndim != 4 or X.shape[1] != len(CHANNELS):
        raise ValueError(f"expected stacks of shape (N, {len(CHANNELS)}, H, W), got {X.shape}")
    return X


def check_target(y, X: np.ndarray, dtype=np.float64) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim == 2:
        y = y[None]
    y = check_array(y, allow_nd=True, dtype=dtype, ensure_all_finite=True)
    if y.shape != (X.shape[0],) + X.shape[2:]:
        raise ValueError(f"target shape {y.shape} does not match inputs {X.shape}")
    return y


def check_divisible(X: np.ndarray, factor: int = 4) -> None:
    if X.shape[-1] % factor or X.shape[-2] % factor:
        raise ValueError(f"spatial size {X.shape[-2:]} must be divisible by {factor}")
