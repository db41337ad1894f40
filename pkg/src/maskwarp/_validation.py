"""Input validation helpers shared by the public functions and estimators."""

import numpy as np

from .exceptions import DimensionError, DomainError


def check_image(image, name="image", copy=False):
    """Return ``image`` as a float64 (H, W, C) array with C in {1, 3}.

    2-D input is promoted to a single channel.
    """
    arr = np.array(image, dtype=np.float64, copy=copy) if copy else np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise DimensionError(f"{name} must have shape (H, W) or (H, W, C) with C in {{1, 3}}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} contains non-finite values")
    return arr


def check_field(field, name="field", positive=False):
    """Return a finite float64 (H, W) array; optionally require strictly positive entries."""
    arr = np.asarray(field, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} contains non-finite values")
    if positive and np.any(arr <= 0):
        raise DomainError(f"{name} must be strictly positive")
    return arr


def check_same_hw(a, b, names=("a", "b")):
    if a.shape[:2] != b.shape[:2]:
        raise DimensionError(f"{names[0]} has spatial shape {a.shape[:2]} but {names[1]} has {b.shape[:2]}")


def check_same_shape(a, b, names=("a", "b")):
    if a.shape != b.shape:
        raise DimensionError(f"{names[0]} has shape {a.shape} but {names[1]} has {b.shape}")


def check_mask(mask, shape, name="mask"):
    arr = np.asarray(mask, dtype=np.float64)
    if arr.shape != tuple(shape):
        raise DimensionError(f"{name} must have shape {tuple(shape)}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} contains non-finite values")
    return arr


def check_vector(v, size, name="vector"):
    arr = np.asarray(v, dtype=np.float64).reshape(-1)
    if arr.shape != (size,):
        raise DimensionError(f"{name} must have {size} entries, got {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} contains non-finite values")
    return arr
