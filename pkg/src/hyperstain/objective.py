"""Heteroscedastic Gaussian negative log-likelihood.

The predicted log-variance passes through a gradient-preserving clamp:
the forward pass is a hard clip to [a, b], while the backward multiplier
is 1 inside the open interval and 1 - tanh^2(x) at or beyond the bounds,
so extreme log-variances stop moving the loss but never become
completely unreachable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError, NumericError


@dataclass(frozen=True)
class ClampSpec:
    a: float = -15.0
    b: float = 15.0
    eps: float = 1e-8

    def __post_init__(self):
        if not self.a < self.b:
            raise ValueError("clamp bounds must satisfy a < b")
        if self.eps <= 0:
            raise ValueError("eps must be positive")


def _sech2(v):
    """1 - tanh^2(v), evaluated as sech^2 so it never rounds to zero for
    any magnitude a log-variance can realistically reach."""
    e = np.exp(-np.abs(v))
    s = 2.0 * e / (1.0 + e * e)
    return s * s


def clamp_grad(ell, spec=ClampSpec()):
    """Hard clip of ``ell`` to [a, b] whose backward pass downweights,
    but never kills, gradients outside the open interval."""
    d = ell.data
    data = np.clip(d, spec.a, spec.b)

    def backward(grad):
        inside = (d > spec.a) & (d < spec.b)
        mult = np.where(inside, 1.0, _sech2(d)).astype(grad.dtype, copy=False)
        T._accumulate(ell, grad * mult)

    return T._make(data, (ell,), backward)


def clamp_backward_multiplier(values, spec=ClampSpec()):
    """The clamp's backward factor, exposed for verification."""
    v = np.asarray(values, dtype=np.float64)
    return np.where((v > spec.a) & (v < spec.b), 1.0, _sech2(v))


def hetero_nll(target, pred, spec=ClampSpec(), weight=None):
    """Mean over all elements of (target-mean)^2/(exp(l)+eps) + l, with
    the log-variance clamped.  ``weight`` (optional 0/1 array) restricts
    the mean to selected elements, e.g. masked pixels only."""
    tgt = np.asarray(target.data if isinstance(target, T.Tensor) else target)
    if tgt.shape != pred.mean.shape:
        raise DimensionError(
            f"target {tgt.shape} does not match prediction {pred.mean.shape}")
    if not np.all(np.isfinite(tgt)):
        raise NumericError("target contains non-finite values")
    ell = clamp_grad(pred.log_var, spec)
    resid = T.sub(T.Tensor(tgt.astype(pred.mean.dtype, copy=False)), pred.mean)
    term = T.square(resid) / (T.exp(ell) + spec.eps) + ell
    if weight is None:
        loss = T.mean_(term)
    else:
        w = np.asarray(weight, dtype=term.dtype)
        if w.shape != term.shape:
            raise DimensionError("weight shape must match the target")
        total = float(w.sum())
        if total <= 0:
            raise ValueError("weight selects no elements")
        loss = T.sum_(term * T.Tensor(w)) * (1.0 / total)
    if not np.isfinite(loss.data[0]):
        bad = ~np.isfinite(term.data)
        channel = int(np.nonzero(bad.reshape(bad.shape[0], -1).any(axis=1))[0][0])
        raise NumericError(f"non-finite loss in channel {channel}")
    return loss
