"""Raw-image pipeline: arcsinh variance stabilization, Butterworth
low-pass denoising, panel-wise percentile normalization, tiling and
augmentation.

Value transforms run in the fixed order arcsinh -> butterworth ->
normalize; outputs live in [0, 1].  Normalization is per panel, never
per image: every image of a panel shares one upper bound.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .errors import DimensionError


@dataclass(frozen=True)
class PanelStats:
    """Pooled cross-marker 99th-percentile bound (lower bound is 0)."""

    upper_bound: float

    def __post_init__(self):
        if self.upper_bound <= 0:
            raise ValueError("upper bound must be positive")


@dataclass(frozen=True)
class PreprocessConfig:
    cofactor: float = 5.0
    butter_order: int = 2
    butter_cutoff: float = 0.25
    subimage: int = 256
    crop: int = 128

    def __post_init__(self):
        if self.cofactor <= 0:
            raise ValueError("cofactor must be positive")
        if self.butter_order < 1:
            raise ValueError("filter order must be a positive integer")
        if not 0.0 < self.butter_cutoff <= 0.5:
            raise ValueError("cutoff must lie in (0, 0.5]")
        if self.crop > self.subimage:
            raise ValueError("crop must not exceed the subimage size")


def arcsinh_transform(x, cofactor=5.0):
    """Monotone, invertible y = asinh(x / cofactor)."""
    if cofactor <= 0:
        raise ValueError("cofactor must be positive")
    return np.arcsinh(np.asarray(x) / cofactor)


def butterworth_lowpass(x, order=2, cutoff=0.25):
    """Frequency-domain low-pass with gain 1/sqrt(1+(f/f_c)^(2n)).

    ``f`` is the radial normalized frequency, scaled so the Nyquist
    corner sits at 0.5; the DC gain is exactly 1 and the output is real.
    Accepts [H,W] or [C,H,W] rasters (channels filtered independently).
    """
    if not 0.0 < cutoff <= 0.5:
        raise ValueError("cutoff must lie in (0, 0.5]")
    if order < 1:
        raise ValueError("filter order must be a positive integer")
    arr = np.asarray(x)
    h, w = arr.shape[-2], arr.shape[-1]
    if h < 4 or w < 4:
        raise DimensionError("image must be at least 4x4")
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    f = np.sqrt((fy * fy + fx * fx) / 2.0)
    gain = 1.0 / np.sqrt(1.0 + (f / cutoff) ** (2 * order))
    spectrum = np.fft.fft2(arr, axes=(-2, -1)) * gain
    out = np.fft.ifft2(spectrum, axes=(-2, -1)).real
    return out.astype(arr.dtype, copy=False)


def _nearest_rank_percentile(pool, q):
    pool = np.sort(pool, axis=None)
    idx = math.ceil(q / 100.0 * pool.size)
    return float(pool[max(idx, 1) - 1])


def compute_panel_stats(images, q=99.0):
    """Pool every pixel of every marker across the panel's images and
    take the nearest-rank ``q``-th percentile, rounded up to one decimal."""
    stacks = [np.asarray(img).ravel() for img in images]
    if not stacks or sum(s.size for s in stacks) == 0:
        raise ValueError("empty pixel pool")
    pool = np.concatenate(stacks)
    pct = _nearest_rank_percentile(pool, q)
    bound = math.ceil(pct * 10.0 - 1e-9) / 10.0
    if bound <= 0:
        raise ValueError(f"degenerate panel pool: percentile {pct} yields no positive bound")
    return PanelStats(upper_bound=bound)


def panel_normalize(x, stats):
    """Scale by the panel bound and clip into [0, 1]."""
    return np.clip(np.asarray(x) / stats.upper_bound, 0.0, 1.0)


def extract_subimages(x, size):
    """Non-overlapping row-major tiles from the origin; partial border
    tiles are discarded.  Smaller-than-tile images yield an empty list."""
    arr = np.asarray(x)
    h, w = arr.shape[-2], arr.shape[-1]
    tiles = []
    for i in range(h // size):
        for j in range(w // size):
            tiles.append(arr[..., i * size:(i + 1) * size, j * size:(j + 1) * size].copy())
    return tiles


def dihedral_transform(x, element):
    """Apply one of the 8 square symmetries: rotate CCW by 90*(element%4)
    degrees, then flip horizontally if element >= 4.  All channels move
    together."""
    if not 0 <= element < 8:
        raise ValueError("dihedral element must be in 0..7")
    out = np.rot90(x, k=element % 4, axes=(-2, -1))
    if element >= 4:
        out = out[..., ::-1]
    return out


def dihedral_inverse(element):
    """Group inverse: flips are involutions, rotations invert."""
    if not 0 <= element < 8:
        raise ValueError("dihedral element must be in 0..7")
    return element if element >= 4 else (4 - element) % 4


def augment_crop(sub, crop, rng):
    """Uniform dihedral symmetry followed by a uniform-offset crop."""
    arr = np.asarray(sub)
    if crop > arr.shape[-2] or crop > arr.shape[-1]:
        raise DimensionError("crop larger than the subimage")
    element = int(rng.integers(8))
    arr = dihedral_transform(arr, element)
    oy = int(rng.integers(arr.shape[-2] - crop + 1))
    ox = int(rng.integers(arr.shape[-1] - crop + 1))
    return np.ascontiguousarray(arr[..., oy:oy + crop, ox:ox + crop])


def center_crop(x, crop):
    """Deterministic central crop with floor'd offsets."""
    arr = np.asarray(x)
    h, w = arr.shape[-2], arr.shape[-1]
    if h < crop or w < crop:
        raise DimensionError(f"image {h}x{w} smaller than crop {crop}")
    oy = (h - crop) // 2
    ox = (w - crop) // 2
    return arr[..., oy:oy + crop, ox:ox + crop]


class PanelPreprocessor(TransformerMixin, BaseEstimator):
    """Transformer over one panel's images.

    ``fit`` learns the panel's percentile bound from the arcsinh- and
    Butterworth-transformed pixel pool; ``transform`` applies
    arcsinh -> butterworth -> normalize to a single [C,H,W] raster.
    """

    def __init__(self, cofactor=5.0, butter_order=2, butter_cutoff=0.25):
        self.cofactor = cofactor
        self.butter_order = butter_order
        self.butter_cutoff = butter_cutoff

    def _value_transform(self, x):
        y = arcsinh_transform(x, self.cofactor)
        return butterworth_lowpass(y, self.butter_order, self.butter_cutoff)

    def fit(self, images, y=None):
        transformed = [self._value_transform(img) for img in images]
        self.stats_ = compute_panel_stats(transformed)
        return self

    def transform(self, x):
        if not hasattr(self, "stats_"):
            raise NotFittedError("PanelPreprocessor must be fitted first")
        return panel_normalize(self._value_transform(x), self.stats_)
