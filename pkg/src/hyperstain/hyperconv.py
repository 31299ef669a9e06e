"""Marker-conditional kernel generation and hyperconvolution operators.

Each vocabulary marker owns a learnable flat parameter vector that
reshapes into a convolution kernel.  For an ordered marker set the
encoder concatenates per-marker kernels along the kernel input-channel
axis into one hyperkernel, so a single convolution fuses all marker
blocks; the decoder instead convolves the latent map with each marker's
kernel independently and stacks the results along a new leading axis.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import DimensionError, VocabularyError
from .markers import MarkerSet


class KernelGeneratorTable:
    """Per-marker flat kernel parameters for one side of the model.

    ``side`` is "encoder" or "decoder"; ``kernel_shape`` is
    (d_out, d_in, h, w).  Rows are reshaped row-major into kernels.
    Random rows are fan-in scaled (std = 1/sqrt(d_in*h*w)) so an
    assembled hyperkernel has standard conv-init statistics regardless
    of how many markers it concatenates.
    """

    def __init__(self, side, vocab_size, kernel_shape, rng=None, dtype=np.float32):
        if side not in ("encoder", "decoder"):
            raise ValueError("side must be 'encoder' or 'decoder'")
        d_out, d_in, h, w = (int(v) for v in kernel_shape)
        if min(d_out, d_in, h, w) < 1 or vocab_size < 1:
            raise ValueError("kernel dims and vocabulary size must be positive")
        self.side = side
        self.vocab_size = int(vocab_size)
        self.kernel_shape = (d_out, d_in, h, w)
        flat = d_out * d_in * h * w
        if rng is None:
            data = np.zeros((vocab_size, flat), dtype=dtype)
        else:
            std = 1.0 / np.sqrt(d_in * h * w)
            data = rng.normal(0.0, std, size=(vocab_size, flat)).astype(dtype)
        self.table = T.Tensor(data, requires_grad=True)

    @property
    def flat_size(self):
        d_out, d_in, h, w = self.kernel_shape
        return d_out * d_in * h * w

    def _check(self, marker):
        if not 0 <= marker < self.vocab_size:
            raise VocabularyError(
                f"marker index {marker} outside vocabulary of size {self.vocab_size}")


def generate_kernel(table, marker):
    """Kernel for one marker: embedding-row lookup reshaped to
    (d_out, d_in, h, w).  Gradients flow back to that row only."""
    table._check(marker)
    row = T.gather_rows(table.table, [marker])
    return T.reshape(row, table.kernel_shape)


class HyperKernel:
    """Assembled encoder weight tensor [d_out, C*d_in, h, w] plus the
    marker set it was built from."""

    __slots__ = ("weights", "source")

    def __init__(self, weights, source):
        self.weights = weights
        self.source = source


def assemble_encoder_hyperkernel(table, markers):
    """Concatenate per-marker encoder kernels along the kernel
    input-channel axis, in marker-set order."""
    if len(markers) == 0:
        raise ValueError("marker set must be non-empty")
    kernels = [generate_kernel(table, m) for m in markers]
    weights = kernels[0] if len(kernels) == 1 else T.concat(kernels, axis=1)
    return HyperKernel(weights, MarkerSet(markers))


def encoder_hyperconv(table, w, markers, spec=T.ConvSpec()):
    """Fuse blockwise marker features [C*d_in, H, W] into the pan-marker
    space [d_out, H', W'] with the assembled hyperkernel."""
    d_out, d_in, h, kw = table.kernel_shape
    cin = w.shape[0] if w.ndim == 3 else w.shape[1]
    if cin != len(markers) * d_in:
        raise DimensionError(
            f"input has {cin} channels, expected {len(markers)}*{d_in}")
    hk = assemble_encoder_hyperkernel(table, markers)
    return T.conv2d(w, hk.weights, spec)


def decoder_hyperconv(table, z, markers, spec=T.ConvSpec()):
    """Convolve the latent map with each target marker's kernel and stack
    along a new leading marker axis: [C_d, d_out, H', W']."""
    if len(markers) == 0:
        raise ValueError("marker set must be non-empty")
    for m in markers:
        table._check(m)
    d_out, d_in, h, w = table.kernel_shape
    if z.ndim != 3:
        raise DimensionError("latent map must be rank 3 [C, H, W]")
    if z.shape[0] != d_in:
        raise DimensionError(f"latent has {z.shape[0]} channels, expected {d_in}")
    rows = T.gather_rows(table.table, list(markers))
    # stacking along the output-channel axis keeps per-marker blocks independent
    kern = T.reshape(rows, (len(markers) * d_out, d_in, h, w))
    u = T.conv2d(z, kern, spec)
    return T.reshape(u, (len(markers), d_out, u.shape[1], u.shape[2]))
