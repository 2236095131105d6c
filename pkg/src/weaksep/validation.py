"""Input checks shared by the estimator wrappers."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array


def check_waveforms(X) -> np.ndarray:
    """2-D ``[N, L]`` finite float array (a single 1-D waveform is promoted)."""
    X = np.asarray(X)
    if X.ndim == 1:
        X = X[None]
    return check_array(X, dtype=np.float64, ensure_2d=True)


def check_magnitudes(X, n_bins: int | None = None) -> np.ndarray:
    """``[N, F, T]`` nonnegative finite float32 magnitudes."""
    X = check_array(X, dtype=np.float32, allow_nd=True, ensure_2d=False)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise ValueError(f"expected magnitudes of shape [N, F, T], got {X.shape}")
    if (X < 0).any():
        raise ValueError("magnitudes must be nonnegative")
    if n_bins is not None and X.shape[1] != n_bins:
        raise ValueError(f"expected {n_bins} frequency bins, got {X.shape[1]}")
    return X


def check_labels(y, n_samples: int, n_frames: int) -> np.ndarray:
    """Binary ``[N, n, T]`` frame labels; ``[N, n]`` clip labels are broadcast over frames."""
    y = check_array(y, dtype=np.float32, allow_nd=True, ensure_2d=False)
    if y.ndim == 2:
        y = np.repeat(y[:, :, None], n_frames, axis=2)
    if y.ndim != 3 or y.shape[0] != n_samples or y.shape[2] != n_frames:
        raise ValueError(f"labels must be [N, n, T] or [N, n] matching {n_samples} clips of {n_frames} frames, "
                         f"got {y.shape}")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("labels must be binary")
    return y


def check_references(y, X: np.ndarray) -> np.ndarray:
    """Per-source magnitudes ``[N, n, F, T]`` aligned with mixtures ``X``."""
    y = check_array(y, dtype=np.float32, allow_nd=True, ensure_2d=False)
    if y.ndim != 4 or y.shape[0] != X.shape[0] or y.shape[2:] != X.shape[1:]:
        raise ValueError(f"reference magnitudes must be [N, n, F, T] aligned with {X.shape}, got {y.shape}")
    if (y < 0).any():
        raise ValueError("reference magnitudes must be nonnegative")
    return y
