"""Input validation helpers for the dense map types the engine consumes.

Every public entry point funnels its array inputs through these checks so
that shape or range violations fail loudly at the boundary instead of
producing silent nonsense deep in a search.
"""
from __future__ import annotations

import numpy as np

from .exceptions import ValidationError

PROB_SUM_TOL = 1e-4


def check_feature_map(arr, name: str = "features") -> np.ndarray:
    """Validate an H x W x d float feature map; returns it as float32."""
    arr = np.asarray(arr)
    if arr.ndim != 3:
        raise ValidationError(f"{name}: expected H x W x d array, got shape {arr.shape}")
    arr = arr.astype(np.float32, copy=False)
    if not np.isfinite(arr).all():
        raise ValidationError(f"{name}: non-finite entries")
    return arr


def check_probability_map(arr, num_classes: int | None = None,
                          name: str = "probs") -> np.ndarray:
    """Validate an H x W x K posterior map: range [0,1], rows sum to 1."""
    arr = np.asarray(arr)
    if arr.ndim != 3:
        raise ValidationError(f"{name}: expected H x W x K array, got shape {arr.shape}")
    if num_classes is not None and arr.shape[2] != num_classes:
        raise ValidationError(
            f"{name}: expected K={num_classes} classes, got {arr.shape[2]}"
        )
    arr = arr.astype(np.float32, copy=False)
    if not np.isfinite(arr).all():
        raise ValidationError(f"{name}: non-finite entries")
    if arr.min() < 0.0 or arr.max() > 1.0 + PROB_SUM_TOL:
        raise ValidationError(f"{name}: entries outside [0, 1]")
    sums = arr.sum(axis=2, dtype=np.float64)
    if np.abs(sums - 1.0).max() > PROB_SUM_TOL:
        raise ValidationError(f"{name}: per-pixel sums deviate from 1 by more "
                              f"than {PROB_SUM_TOL}")
    return arr


def check_label_mask(arr, num_classes: int, name: str = "labels") -> np.ndarray:
    """Validate an H x W integer class map with values in [0, num_classes)."""
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise ValidationError(f"{name}: expected H x W array, got shape {arr.shape}")
    if num_classes < 2:
        raise ValidationError(f"{name}: num_classes must be >= 2")
    if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
        raise ValidationError(f"{name}: values outside [0, {num_classes})")
    return arr.astype(np.uint8, copy=False)


def check_binary_mask(arr, name: str = "mask") -> np.ndarray:
    """Validate an H x W mask of zeros and ones; returns it as bool."""
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise ValidationError(f"{name}: expected H x W array, got shape {arr.shape}")
    if arr.dtype != bool:
        values = np.unique(arr)
        if not np.isin(values, (0, 1)).all():
            raise ValidationError(f"{name}: entries must be 0 or 1")
        arr = arr.astype(bool)
    return arr


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str = "masks") -> None:
    if a.shape != b.shape:
        raise ValidationError(f"{what}: shape mismatch {a.shape} vs {b.shape}")
