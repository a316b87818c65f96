"""Input validation helpers in the spirit of ``sklearn.utils.validation``."""
from __future__ import annotations

import numpy as np

from .errors import InvalidInputError, ShapeError


def check_image(image, *, dtype=np.float32) -> np.ndarray:
    """Return ``image`` as an ``H x W x 3`` float array scaled to ``[0, 1]``.

    uint8 input is rescaled by 1/255; float input is assumed to already be in
    range and is only checked for finiteness.
    """
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeError(f"expected an H x W x 3 image, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        return (arr.astype(dtype) / 255.0).astype(dtype)
    arr = arr.astype(dtype)
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("image contains non-finite values")
    return arr


def check_mask(mask, shape: tuple[int, int] | None = None) -> np.ndarray:
    """Return ``mask`` as a 2-D uint8 array of zeros and ones."""
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D mask, got shape {arr.shape}")
    if shape is not None and arr.shape != tuple(shape):
        raise ShapeError(f"mask shape {arr.shape} does not match {tuple(shape)}")
    if arr.dtype == bool:
        return arr.astype(np.uint8)
    if not np.isin(arr, (0, 1)).all():
        raise InvalidInputError("mask values must be 0 or 1")
    return arr.astype(np.uint8)


def check_mask_pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = check_mask(pred)
    gt = check_mask(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    return pred, gt


def check_embedding(rows, width: int | None = None, *, allow_empty: bool = True) -> np.ndarray:
    arr = np.asarray(rows, dtype=np.float32)
    if arr.ndim != 2:
        raise ShapeError(f"expected a (k, d) embedding matrix, got shape {arr.shape}")
    if width is not None and arr.shape[1] != width:
        raise ShapeError(f"embedding width {arr.shape[1]} does not match expected {width}")
    if not allow_empty and arr.shape[0] == 0:
        raise InvalidInputError("embedding has no rows")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("embedding contains non-finite values")
    return arr


def check_random_state(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
