"""Small input-checking helpers in the spirit of ``sklearn.utils.validation``."""

import numpy as np

from .exceptions import NumericError, ShapeError


def check_matrix(W, name="W", dtype=np.float64):
    """Return ``W`` as a 2-D finite array of ``dtype``."""
    W = np.asarray(W, dtype=dtype)
    if W.ndim == 1:
        W = W[None, :]
    if W.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {W.shape}")
    if W.size and not np.all(np.isfinite(W)):
        bad = np.argwhere(~np.isfinite(W))[0]
        raise NumericError(f"{name} has a non-finite entry at {tuple(int(i) for i in bad)}")
    return W


def check_vector(x, length=None, name="x", dtype=None):
    x = np.asarray(x, dtype=dtype)
    if x.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {x.shape}")
    if length is not None and x.shape[0] != length:
        raise ShapeError(f"{name} has length {x.shape[0]}, expected {length}")
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{name} contains non-finite values")
    return x


def check_same_shape(a, b, names=("a", "b")):
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"{names[0]} has shape {np.shape(a)} but {names[1]} has shape {np.shape(b)}")


def check_finite_scalar(value, name="loss"):
    if not np.isfinite(value):
        raise NumericError(f"{name} is not finite ({value})")
    return float(value)
