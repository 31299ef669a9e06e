"""Input validation helpers shared by the estimator facade and CLI."""

from __future__ import annotations

import numpy as np

from .errors import DimensionError


def check_raster(x, channels=None, name="image"):
    """Coerce to a finite float32 [C,H,W] array."""
    arr = np.asarray(x, dtype=np.float32)
    if arr.ndim != 3:
        raise DimensionError(f"{name} must be [C,H,W], got shape {arr.shape}")
    if channels is not None and arr.shape[0] != channels:
        raise DimensionError(
            f"{name} has {arr.shape[0]} channels, expected {channels}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_marker_arg(markers, vocab):
    """Accept marker names or vocabulary indices; return a list of indices."""
    out = []
    for m in markers:
        if isinstance(m, str):
            out.append(vocab.index_of(m))
        else:
            out.append(int(m))
    return out
