"""Training-sample construction: target-set subsampling, full-marker
dropout, and patch-wise spatial masking, plus the panel-grouped batch
sampler.

The strict chain in_set < tgt_set <= panel holds for every plan: at
least one target marker is always fully dropped, and the input markers
are drawn from the targets, never from the wider panel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .markers import MarkerSet


@dataclass(frozen=True)
class MaskConfig:
    """Sampling fractions and the spatial patch size.

    alpha bounds the target-set size from below (K is uniform on
    {ceil(alpha*C)..C}), beta bounds the dropout count (M uniform on
    {1..ceil(beta*K)}), rho is the Bernoulli rate of the patch grid.
    """

    alpha: float = 0.75
    beta: float = 0.5
    rho: float = 0.6
    patch: int = 8

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        if not 0.0 < self.beta <= 1.0:
            raise ValueError("beta must lie in (0, 1]")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        if self.patch < 1:
            raise ValueError("patch must be a positive integer")

    def to_dict(self):
        return {"alpha": self.alpha, "beta": self.beta,
                "rho": self.rho, "patch": self.patch}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class MaskPlan:
    """One training sample's (targets, inputs, spatial mask) triple."""

    tgt_set: MarkerSet
    in_set: MarkerSet
    patch_mask: np.ndarray  # bool [|in_set|, H, W], constant on p x p blocks

    def __post_init__(self):
        if not (set(self.in_set.markers) < set(self.tgt_set.markers)):
            raise ValueError("in_set must be a strict subset of tgt_set")
        if self.patch_mask.shape[0] != len(self.in_set):
            raise DimensionError("mask channel count must match |in_set|")


def sample_target_size(c_img, alpha, rng):
    """Target-set size K, uniform on {ceil(alpha*C_img), ..., C_img}."""
    if c_img < 2:
        raise ValueError("panel must have at least 2 markers")
    low = math.ceil(alpha * c_img)
    return int(rng.integers(low, c_img + 1))


def sample_dropout_size(k, beta, rng):
    """Dropout count M, uniform on {1, ..., ceil(beta*K)}."""
    if k < 2:
        raise ValueError("target set must have at least 2 markers to drop one")
    high = math.ceil(beta * k)
    return int(rng.integers(1, high + 1))


def _subsample(markers, count, rng):
    """Uniform subset of the given markers, panel order preserved."""
    picked = rng.choice(len(markers), size=count, replace=False)
    picked = np.sort(picked)
    return MarkerSet(markers[int(i)] for i in picked)


def build_mask_plan(panel, cfg, height, width, rng, k=None):
    """Draw one MaskPlan for an image with the given panel.

    ``k`` fixes the target-set size (the batch sampler draws it once per
    minibatch); when None it is drawn here.
    """
    panel = MarkerSet(panel)
    p = cfg.patch
    if height % p or width % p:
        raise DimensionError(f"patch size {p} must divide {height}x{width}")
    if k is None:
        k = sample_target_size(len(panel), cfg.alpha, rng)
    if not 1 <= k <= len(panel):
        raise ValueError(f"target size {k} invalid for panel of {len(panel)}")
    tgt_set = _subsample(panel, k, rng)
    m = sample_dropout_size(k, cfg.beta, rng)
    in_set = _subsample(tgt_set, k - m, rng)
    grid = rng.random((len(in_set), height // p, width // p)) < cfg.rho
    patch_mask = np.repeat(np.repeat(grid, p, axis=1), p, axis=2)
    return MaskPlan(tgt_set, in_set, patch_mask)


def apply_mask(x, plan):
    """Zero the masked positions of the input channels; everything else
    is returned bit-identical."""
    data = np.asarray(x)
    if data.shape != plan.patch_mask.shape:
        raise DimensionError(
            f"input {data.shape} does not match mask {plan.patch_mask.shape}")
    return np.where(plan.patch_mask, np.zeros((), dtype=data.dtype), data)


def panel_grouped_batches(items, batch_size, rng, panel_key=None):
    """Shuffle and chunk items into batches that never mix panels.

    Every item appears in exactly one batch per call; trailing undersized
    batches are emitted as-is.  ``panel_key`` extracts the grouping key
    (defaults to the item's ``panel`` attribute, falling back to the item
    itself).
    """
    if batch_size < 1:
        raise ValueError("batch size must be positive")
    items = list(items)
    if panel_key is None:
        panel_key = lambda it: getattr(it, "panel", it)
    groups = {}
    for it in items:
        groups.setdefault(panel_key(it), []).append(it)
    batches = []
    for key in groups:
        members = groups[key]
        order = rng.permutation(len(members))
        for start in range(0, len(members), batch_size):
            batches.append([members[int(i)] for i in order[start:start + batch_size]])
    perm = rng.permutation(len(batches))
    return [batches[int(i)] for i in perm]
