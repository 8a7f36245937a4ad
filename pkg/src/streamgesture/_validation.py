"""Input validation helpers in the scikit-learn idiom."""

from __future__ import annotations

import numpy as np
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array, check_is_fitted

from .errors import ShapeError, StateError


class NotFitted(StateError, NotFittedError):
    pass


def check_poses(X, n_features: int | None = None) -> np.ndarray:
    """2-D float64 ``[frames, channels]`` array, optionally with a fixed width."""
    try:
        X = check_array(X, dtype=np.float64, ensure_2d=True, ensure_min_samples=1)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    if n_features is not None and X.shape[1] != n_features:
        raise ShapeError(f"expected {n_features} channels, got {X.shape[1]}")
    return X


def check_windows(X, n_features: int | None = None, multiple_of: int = 4) -> np.ndarray:
    """3-D ``[n, frames, channels]`` float64 array whose length divides evenly."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise ShapeError(f"expected [n, frames, channels], got shape {X.shape}")
    if X.shape[1] % multiple_of:
        raise ShapeError(f"window length {X.shape[1]} is not divisible by {multiple_of}")
    if n_features is not None and X.shape[2] != n_features:
        raise ShapeError(f"expected {n_features} channels, got {X.shape[2]}")
    if not np.isfinite(X).all():
        raise ShapeError("windows contain non-finite values")
    return X


def check_waveform(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError("waveform must be 1-D")
    if not np.isfinite(x).all():
        raise ShapeError("waveform contains non-finite samples")
    return x


def check_fitted(estimator, attribute: str) -> None:
    try:
        check_is_fitted(estimator, attribute)
    except NotFittedError as exc:
        raise NotFitted(str(exc)) from exc
