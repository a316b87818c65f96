"""Row-major run-length mask codec (zero run first)."""
from __future__ import annotations

import numpy as np

from ..errors import CodecError
from ..validation import check_mask


def encode_mask(bitmap) -> dict:
    """Encode a binary mask as ``{"size": [h, w], "counts": [...]}``.

    Runs alternate zeros/ones over the row-major flattening and always start
    with a (possibly empty) run of zeros.
    """
    mask = check_mask(bitmap)
    flat = mask.ravel()
    if flat.size == 0:
        return {"size": list(mask.shape), "counts": []}
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    counts = np.diff(bounds).tolist()
    if flat[0] == 1:
        counts.insert(0, 0)
    return {"size": list(mask.shape), "counts": [int(c) for c in counts]}


def decode_mask(encoded) -> np.ndarray:
    try:
        h, w = (int(v) for v in encoded["size"])
        counts = [int(c) for c in encoded["counts"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise CodecError(f"malformed RLE payload: {exc}") from exc
    if any(c < 0 for c in counts):
        raise CodecError("negative run length")
    if sum(counts) != h * w:
        raise CodecError(f"run lengths sum to {sum(counts)}, expected {h * w}")
    values = np.arange(len(counts)) % 2
    flat = np.repeat(values.astype(np.uint8), counts)
    return flat.reshape(h, w)
