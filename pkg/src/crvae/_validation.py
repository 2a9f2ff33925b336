"""Input validation shared by the estimators and metric functions."""

import numbers

import numpy as np
import torch


def check_images(X, *, dtype=np.float32, name="X"):
    """Return ``X`` as a contiguous ``[N, C, H, W]`` array in [0, 1].

    Three-dimensional input ``[N, H, W]`` is treated as single channel.
    """
    if isinstance(X, torch.Tensor):
        X = X.detach().cpu().numpy()
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise ValueError(f"{name} must have shape [N, C, H, W], got {X.shape}")
    if X.shape[0] < 1:
        raise ValueError(f"{name} is empty")
    if X.shape[1] not in (1, 3):
        raise ValueError(f"{name} must have 1 or 3 channels, got {X.shape[1]}")
    X = np.ascontiguousarray(X, dtype=dtype)
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains NaN or infinite values")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError(f"{name} intensities must lie in [0, 1]")
    return X


def check_latents(Z, *, name="latents"):
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2:
        raise ValueError(f"{name} must be 2-D [N, d], got shape {Z.shape}")
    if Z.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(Z)):
        raise ValueError(f"{name} contains NaN or infinite values")
    return Z


def check_labels(y, n, *, name="labels"):
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n:
        raise ValueError(f"{name} must be 1-D of length {n}, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError(f"{name} must be integers")
        y = y.astype(np.int64)
    return y


def check_probability(p, name):
    if not isinstance(p, numbers.Real) or not 0.0 <= p <= 1.0:
        raise ValueError(f"{name} must be a probability in [0, 1], got {p!r}")
    return float(p)


def check_positive(value, name, *, strict=True):
    if not isinstance(value, numbers.Real) or not np.isfinite(value):
        raise ValueError(f"{name} must be a finite number, got {value!r}")
    if value < 0 or (strict and value == 0):
        bound = "> 0" if strict else ">= 0"
        raise ValueError(f"{name} must be {bound}, got {value!r}")
    return value
