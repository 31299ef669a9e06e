"""Synthetic multi-panel cohorts with planted cross-marker structure.

Each image draws a handful of smooth Gaussian-bump source fields; every
marker channel is a fixed nonnegative mixture of those sources, so
markers sharing sources are mutually predictable.  Gaussian noise is
added per marker, with an intensity-proportional sigma for a subset of
markers so calibration experiments have real heteroscedastic structure
to recover.  Ground truth (clean signal and sigma maps) is written to a
sidecar directory that training never reads.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field

import numpy as np

from .imxp import write_imxp, write_manifest
from .markers import MarkerVocabulary


def _default_dependency():
    # rows sum to <= 1 so mixtures of unit-peak sources stay in [0, 1];
    # marker 10 is deliberately pure noise (zero row)
    return np.array([
        [1.00, 0.00, 0.00, 0.00],
        [0.00, 1.00, 0.00, 0.00],
        [0.00, 0.00, 1.00, 0.00],
        [0.00, 0.00, 0.00, 1.00],
        [0.50, 0.50, 0.00, 0.00],
        [0.00, 0.50, 0.50, 0.00],
        [0.00, 0.00, 0.50, 0.50],
        [0.40, 0.00, 0.00, 0.60],
        [0.50, 0.00, 0.50, 0.00],
        [0.25, 0.25, 0.25, 0.25],
        [0.00, 0.00, 0.00, 0.00],
        [0.00, 0.70, 0.00, 0.30],
    ])


def _default_sigma():
    sigma = np.full(12, 0.03)
    sigma[10] = 0.12
    return sigma


@dataclass
class CohortSpec:
    """Parameters of the synthetic cohort generator."""

    vocab_size: int = 12
    panels: tuple = ((0, 1, 2, 3, 4, 5, 6, 7), (4, 5, 6, 7, 8, 9, 10, 11))
    images_per_panel: int = 64
    image_size: int = 64
    latent_blobs: int = 4
    dependency: np.ndarray = field(default_factory=_default_dependency)
    noise_sigma: np.ndarray = field(default_factory=_default_sigma)
    hetero_markers: tuple = (4, 7, 9)

    def __post_init__(self):
        self.dependency = np.asarray(self.dependency, dtype=np.float64)
        self.noise_sigma = np.asarray(self.noise_sigma, dtype=np.float64)
        if self.dependency.shape != (self.vocab_size, self.latent_blobs):
            raise ValueError(
                f"dependency must be [{self.vocab_size}, {self.latent_blobs}]")
        if np.any(self.dependency < 0) or np.any(self.dependency.sum(axis=1) > 1 + 1e-9):
            raise ValueError("dependency rows must be nonnegative with sum <= 1")
        if self.noise_sigma.shape != (self.vocab_size,) or np.any(self.noise_sigma < 0):
            raise ValueError("noise_sigma must be nonnegative, one per marker")
        for panel in self.panels:
            if any(not 0 <= m < self.vocab_size for m in panel):
                raise ValueError("panel references marker outside the vocabulary")

    def marker_names(self):
        return [f"M{i:02d}" for i in range(self.vocab_size)]

    def vocabulary(self):
        return MarkerVocabulary(self.marker_names())

    def dependent_markers(self):
        """Markers with a planted cross-source signal (nonzero mixture)."""
        return [i for i in range(self.vocab_size) if self.dependency[i].sum() > 0]

    def to_dict(self):
        return {
            "vocab_size": self.vocab_size,
            "panels": [list(p) for p in self.panels],
            "images_per_panel": self.images_per_panel,
            "image_size": self.image_size,
            "latent_blobs": self.latent_blobs,
            "dependency": self.dependency.tolist(),
            "noise_sigma": self.noise_sigma.tolist(),
            "hetero_markers": list(self.hetero_markers),
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "panels" in d:
            d["panels"] = tuple(tuple(p) for p in d["panels"])
        if "hetero_markers" in d:
            d["hetero_markers"] = tuple(d["hetero_markers"])
        if "dependency" in d:
            d["dependency"] = np.asarray(d["dependency"])
        if "noise_sigma" in d:
            d["noise_sigma"] = np.asarray(d["noise_sigma"])
        return cls(**d)


def _source_fields(spec, rng):
    """Smooth unit-peak fields: each source sums 2-4 isotropic bumps."""
    size = spec.image_size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    fields = np.zeros((spec.latent_blobs, size, size))
    for s in range(spec.latent_blobs):
        for _ in range(int(rng.integers(2, 5))):
            cy, cx = rng.uniform(0, size, size=2)
            scale = rng.uniform(size / 10.0, size / 4.0)
            fields[s] += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * scale * scale))
        peak = fields[s].max()
        if peak > 0:
            fields[s] /= peak
    return fields


def generate_image(spec, panel, rng):
    """One synthetic multiplex image -> (clean, noisy, sigma_map), each
    [C,H,W] float32 in panel order."""
    sources = _source_fields(spec, rng)
    clean = np.empty((len(panel), spec.image_size, spec.image_size))
    sigma_map = np.empty_like(clean)
    for c, m in enumerate(panel):
        mix = np.tensordot(spec.dependency[m], sources, axes=(0, 0))
        clean[c] = np.clip(mix, 0.0, 1.0)
        base = spec.noise_sigma[m]
        if m in spec.hetero_markers:
            sigma_map[c] = base * (0.15 + 0.85 * clean[c])
        else:
            sigma_map[c] = base
    noise = rng.normal(0.0, 1.0, size=clean.shape) * sigma_map
    noisy = np.clip(clean + noise, 0.0, 1.0)
    return (clean.astype(np.float32), noisy.astype(np.float32),
            sigma_map.astype(np.float32))


def generate_cohort(spec, out_dir, seed=0):
    """Write the cohort to disk: manifest, observed images, and a truth/
    sidecar (clean + sigma) used only for evaluation.  Deterministic in
    ``seed``; returns the list of written image paths."""
    names = spec.marker_names()
    vocab = spec.vocabulary()
    img_dir = os.path.join(out_dir, "images")
    truth_dir = os.path.join(out_dir, "truth")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(truth_dir, exist_ok=True)
    write_manifest(os.path.join(out_dir, "manifest.txt"), vocab,
                   [[names[m] for m in panel] for panel in spec.panels])
    written = []
    for pi, panel in enumerate(spec.panels):
        panel_names = [names[m] for m in panel]
        for ii in range(spec.images_per_panel):
            rng = np.random.default_rng(
                np.random.SeedSequence(entropy=seed, spawn_key=(pi, ii)))
            clean, noisy, sigma = generate_image(spec, panel, rng)
            stem = f"p{pi}_i{ii:03d}"
            path = os.path.join(img_dir, stem + ".imxp")
            write_imxp(path, noisy, panel_names)
            write_imxp(os.path.join(truth_dir, stem + ".clean.imxp"), clean, panel_names)
            write_imxp(os.path.join(truth_dir, stem + ".sigma.imxp"), sigma, panel_names)
            written.append(path)
    return written


def directory_digest(root):
    """SHA-256 over sorted relative paths and file contents (for
    determinism checks)."""
    digest = hashlib.sha256()
    for dirpath, dirnames, filenames in sorted(os.walk(root)):
        dirnames.sort()
        for fn in sorted(filenames):
            full = os.path.join(dirpath, fn)
            digest.update(os.path.relpath(full, root).encode())
            with open(full, "rb") as fh:
                digest.update(fh.read())
    return digest.hexdigest()
