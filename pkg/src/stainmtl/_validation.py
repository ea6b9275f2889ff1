"""Input validation helpers shared by the functional and estimator APIs."""

import numpy as np

from .exceptions import InvalidInput


def check_rgb(img, name="image"):
    """Validate an 8-bit RGB image of shape (height, width, 3).

    Integer arrays in [0, 255] are accepted and cast to uint8; anything else
    raises InvalidInput.
    """
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise InvalidInput(f"{name} must have shape (height, width, 3), got {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InvalidInput(f"{name} is empty")
    if arr.dtype == np.uint8:
        return arr
    if not np.issubdtype(arr.dtype, np.integer):
        raise InvalidInput(f"{name} must be an integer array, got dtype {arr.dtype}")
    if arr.min() < 0 or arr.max() > 255:
        raise InvalidInput(f"{name} values must lie in [0, 255]")
    return arr.astype(np.uint8)


def check_od(od, name="od"):
    """Validate an optical-density matrix of shape (channels, pixels)."""
    arr = np.asarray(od, dtype=float)
    if arr.ndim != 2:
        raise InvalidInput(f"{name} must be a (channels, pixels) matrix, got shape {arr.shape}")
    if arr.shape[1] < 1:
        raise InvalidInput(f"{name} has no pixels")
    if not np.all(np.isfinite(arr)):
        raise InvalidInput(f"{name} contains non-finite values")
    if np.any(arr < 0):
        raise InvalidInput(f"{name} contains negative values")
    return arr


def check_mask(mask, name="mask"):
    arr = np.asarray(mask)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InvalidInput(f"{name} must be a non-empty 2-D array, got shape {arr.shape}")
    return arr.astype(bool, copy=False)


def check_same_shape(a, b, what="masks"):
    if a.shape != b.shape:
        raise InvalidInput(f"{what} differ in shape: {a.shape} vs {b.shape}")


def check_probability(p, name):
    if not 0.0 <= p <= 1.0:
        raise InvalidInput(f"{name} must lie in [0, 1], got {p}")
