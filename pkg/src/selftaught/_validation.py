"""Input validation helpers shared by the functional core and the estimators."""

import numpy as np


def check_image(img, name="image"):
    """Return ``img`` as a finite float64 (H, W) array."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D (H, W), got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")
    return arr


def check_mask(mask, name="mask"):
    """Return ``mask`` as a uint8 (H, W) array with values in {0, 1}."""
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D (H, W), got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError(f"{name} is empty")
    if arr.dtype == bool:
        return arr.astype(np.uint8)
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError(f"{name} must only contain 0 and 1")
    return arr.astype(np.uint8)


def check_probmap(probs, name="probs", atol=1e-6):
    """Return ``probs`` as a float64 (H, W, L) array of per-pixel distributions."""
    arr = np.asarray(probs, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] < 2:
        raise ValueError(f"{name} must have shape (H, W, L) with L >= 2, got {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name} must lie in [0, 1]")
    if np.abs(arr.sum(axis=2) - 1.0).max() > atol:
        raise ValueError(f"{name} rows must sum to 1")
    return arr


def check_same_shape(a, b, names=("a", "b")):
    if np.shape(a)[:2] != np.shape(b)[:2]:
        raise ValueError(
            f"dimension mismatch: {names[0]} {np.shape(a)[:2]} vs {names[1]} {np.shape(b)[:2]}"
        )


def check_image_stack(X, name="X"):
    """Accept one (H, W) image or an (n, H, W) stack; return float64 (n, H, W)."""
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[0] == 0:
        raise ValueError(f"{name} must be (n, H, W) with n >= 1, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")
    return arr


def check_mask_stack(y, name="y"):
    arr = np.asarray(y)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"{name} must be (n, H, W), got shape {arr.shape}")
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError(f"{name} must only contain 0 and 1")
    return arr.astype(np.uint8)


def check_random_state(seed):
    """Turn ``seed`` into a ``numpy.random.Generator``."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
