"""Dense-tensor substrate with reverse-mode gradients.

Works on plain numpy arrays of rank 1-4.  Rank-4 data follows the
[N, C, H, W] layout (N doubles as a marker/batch axis); rank-3 is a single
[C, H, W] feature map.  Every operation is a static forward/backward pair:
the forward builds a node holding a closure that routes gradients to its
parents, and ``Tensor.backward`` replays the closures in reverse
topological order.

Convolution uses cross-correlation semantics (no kernel flip) with zero
padding, matching mainstream vision backbones.  Training runs in float32;
gradient checks should be run in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf as _erf

from .errors import DimensionError, NumericError

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _as_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(np.float32)


class Tensor:
    """A dense array plus an optional gradient and backward closure."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_array(data, dtype)
        if self.data.ndim < 1 or self.data.ndim > 4:
            raise DimensionError(f"rank must be 1-4, got {self.data.ndim}")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    # -- autograd ------------------------------------------------------
    def backward(self, seed=None):
        """Propagate gradients from this node to every reachable leaf."""
        if seed is None:
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=self.data.dtype)
            if seed.shape != self.data.shape:
                raise DimensionError("seed gradient shape mismatch")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = seed
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def _coerce(value, dtype):
    if isinstance(value, Tensor):
        return value
    arr = np.asarray(value, dtype=dtype)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    return Tensor(arr)


def _accumulate(tensor, grad):
    if not tensor.requires_grad:
        return
    if tensor.grad is None:
        tensor.grad = grad.copy() if isinstance(grad, np.ndarray) else np.asarray(grad)
    else:
        tensor.grad = tensor.grad + grad


def _make(data, parents, backward):
    out = Tensor(data, dtype=data.dtype)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------

def add(a, b):
    a = a if isinstance(a, Tensor) else _coerce(a, b.dtype)
    b = _coerce(b, a.dtype)
    data = a.data + b.data

    def backward(grad):
        _accumulate(a, _unbroadcast(grad, a.data.shape))
        _accumulate(b, _unbroadcast(grad, b.data.shape))

    return _make(data, (a, b), backward)


def sub(a, b):
    a = a if isinstance(a, Tensor) else _coerce(a, b.dtype)
    b = _coerce(b, a.dtype)
    data = a.data - b.data

    def backward(grad):
        _accumulate(a, _unbroadcast(grad, a.data.shape))
        _accumulate(b, _unbroadcast(-grad, b.data.shape))

    return _make(data, (a, b), backward)


def mul(a, b):
    a = a if isinstance(a, Tensor) else _coerce(a, b.dtype)
    b = _coerce(b, a.dtype)
    data = a.data * b.data

    def backward(grad):
        _accumulate(a, _unbroadcast(grad * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(grad * a.data, b.data.shape))

    return _make(data, (a, b), backward)


def div(a, b):
    a = a if isinstance(a, Tensor) else _coerce(a, b.dtype)
    b = _coerce(b, a.dtype)
    data = a.data / b.data

    def backward(grad):
        _accumulate(a, _unbroadcast(grad / b.data, a.data.shape))
        _accumulate(b, _unbroadcast(-grad * a.data / (b.data * b.data), b.data.shape))

    return _make(data, (a, b), backward)


def square(x):
    data = x.data * x.data

    def backward(grad):
        _accumulate(x, grad * (2.0 * x.data))

    return _make(data, (x,), backward)


def exp(x):
    data = np.exp(x.data)

    def backward(grad):
        _accumulate(x, grad * data)

    return _make(data, (x,), backward)


def sqrt(x):
    data = np.sqrt(x.data)

    def backward(grad):
        _accumulate(x, grad * (0.5 / data))

    return _make(data, (x,), backward)


def tanh(x):
    data = np.tanh(x.data)

    def backward(grad):
        _accumulate(x, grad * (1.0 - data * data))

    return _make(data, (x,), backward)


def sigmoid(x):
    # stable piecewise form: never exponentiates a large positive value
    d = x.data
    data = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                    np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    data = data.astype(d.dtype, copy=False)

    def backward(grad):
        _accumulate(x, grad * data * (1.0 - data))

    return _make(data, (x,), backward)


def gelu(x):
    """Exact (erf-based) Gaussian error linear unit."""
    d = x.data
    cdf = 0.5 * (1.0 + _erf(d * _INV_SQRT2))
    data = (d * cdf).astype(d.dtype, copy=False)

    def backward(grad):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * d * d)
        _accumulate(x, grad * (cdf + d * pdf).astype(d.dtype, copy=False))

    return _make(data, (x,), backward)


def pointwise_activation(x, kind):
    """Elementwise nonlinearity; ``kind`` is ``"gelu"`` or ``"sigmoid"``."""
    if kind == "gelu":
        return gelu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation kind {kind!r}")


# ---------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------

def sum_(x, axis=None, keepdims=False):
    raw = np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=x.dtype)
    scalar = raw.ndim == 0
    data = raw.reshape(1) if scalar else raw

    def backward(grad):
        if scalar:
            g = grad.reshape(())
        elif axis is not None and not keepdims:
            g = np.expand_dims(grad, axis)
        else:
            g = grad
        _accumulate(x, np.ascontiguousarray(np.broadcast_to(g, x.data.shape)))

    return _make(data, (x,), backward)


def mean_(x, axis=None, keepdims=False):
    if axis is None:
        count = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for a in axes:
            count *= x.data.shape[a]
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x, shape):
    data = x.data.reshape(shape)

    def backward(grad):
        _accumulate(x, grad.reshape(x.data.shape))

    return _make(data, (x,), backward)


def transpose(x, axes):
    data = x.data.transpose(axes)
    inverse = np.argsort(axes)

    def backward(grad):
        _accumulate(x, grad.transpose(inverse))

    return _make(data, (x,), backward)


def concat(tensors, axis=0):
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(grad):
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * grad.ndim
            sl[axis] = slice(start, stop)
            _accumulate(t, grad[tuple(sl)])

    return _make(data, tuple(tensors), backward)


def narrow(x, axis, start, length):
    """Contiguous slice along one axis."""
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    data = x.data[sl].copy()

    def backward(grad):
        full = np.zeros_like(x.data)
        full[sl] = grad
        _accumulate(x, full)

    return _make(data, (x,), backward)


def gather_rows(table, indices):
    """Select rows of a rank-2 table; gradients scatter-add back."""
    idx = np.asarray(indices, dtype=np.intp)
    data = table.data[idx].copy()

    def backward(grad):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, grad)
        _accumulate(table, full)

    return _make(data, (table,), backward)


def add_bias(x, b):
    """Add a per-channel bias to a [C,H,W] or [N,C,H,W] map."""
    if x.ndim == 3:
        data = x.data + b.data[:, None, None]
        red = (1, 2)
    elif x.ndim == 4:
        data = x.data + b.data[None, :, None, None]
        red = (0, 2, 3)
    else:
        raise DimensionError("add_bias expects rank-3 or rank-4 input")

    def backward(grad):
        _accumulate(x, grad)
        _accumulate(b, grad.sum(axis=red))

    return _make(data, (x, b), backward)


# ---------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------

@dataclass(frozen=True)
class ConvSpec:
    """Stride / padding / groups of a 2-D convolution."""

    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError("stride must be positive")
        if self.padding < 0:
            raise ValueError("padding must be non-negative")
        if self.groups < 1:
            raise ValueError("groups must be positive")


def _conv_geometry(x_shape, k_shape, spec):
    n, cin, height, width = x_shape
    cout, cg, kh, kw = k_shape
    if cin % spec.groups or cout % spec.groups:
        raise DimensionError(
            f"groups={spec.groups} must divide input ({cin}) and output ({cout}) channels")
    if cg != cin // spec.groups:
        raise DimensionError(
            f"kernel expects {cg} channels per group, input provides {cin // spec.groups}")
    hp = height + 2 * spec.padding
    wp = width + 2 * spec.padding
    if kh > hp or kw > wp:
        raise DimensionError(
            f"kernel {kh}x{kw} larger than padded input {hp}x{wp}: empty output")
    ho = (hp - kh) // spec.stride + 1
    wo = (wp - kw) // spec.stride + 1
    return ho, wo


def _conv1x1(x, k, squeeze, xd):
    """Fast path: pointwise convolution is a channel-mixing matmul."""
    n, cin, height, width = xd.shape
    cout = k.data.shape[0]
    k2 = k.data.reshape(cout, cin)
    xf = xd.reshape(n, cin, height * width)
    out = np.matmul(k2, xf).reshape(n, cout, height, width)
    if squeeze:
        out = out[0]

    def backward(grad):
        go = (grad[None] if squeeze else grad).reshape(n, cout, height * width)
        if k.requires_grad:
            gk = np.matmul(go, xf.transpose(0, 2, 1)).sum(axis=0)
            _accumulate(k, gk.reshape(k.data.shape))
        if x.requires_grad:
            gx = np.matmul(k2.T, go).reshape(n, cin, height, width)
            _accumulate(x, gx[0] if squeeze else gx)

    return _make(out, (x, k), backward)


def _conv_depthwise(x, k, spec, squeeze, xd):
    """Fast path for groups == C_in == C_out: per-channel correlation,
    decomposed over kernel offsets to avoid the grouped im2col blow-up."""
    n, cin, height, width = xd.shape
    _, _, kh, kw = k.data.shape
    s, p = spec.stride, spec.padding
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    hp, wp = height + 2 * p, width + 2 * p
    ho = (hp - kh) // s + 1
    wo = (wp - kw) // s + 1
    kflat = k.data[:, 0]
    out = np.zeros((n, cin, ho, wo), dtype=xd.dtype)
    scratch = np.empty_like(out)
    for i in range(kh):
        for j in range(kw):
            np.multiply(xp[:, :, i:i + s * ho:s, j:j + s * wo:s],
                        kflat[:, i, j][None, :, None, None], out=scratch)
            out += scratch
    if squeeze:
        out = out[0]

    def backward(grad):
        go = grad[None] if squeeze else grad
        if k.requires_grad:
            gk = np.empty((cin, 1, kh, kw), dtype=grad.dtype)
            for i in range(kh):
                for j in range(kw):
                    gk[:, 0, i, j] = (
                        go * xp[:, :, i:i + s * ho:s, j:j + s * wo:s]
                    ).sum(axis=(0, 2, 3))
            _accumulate(k, gk)
        if x.requires_grad:
            gxp = np.zeros((n, cin, hp, wp), dtype=grad.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += (
                        go * kflat[:, i, j][None, :, None, None])
            gx = gxp[:, :, p:p + height, p:p + width] if p else gxp
            _accumulate(x, gx[0] if squeeze else gx)

    return _make(out, (x, k), backward)


def conv2d(x, k, spec=ConvSpec()):
    """2-D cross-correlation of ``x`` ([C,H,W] or [N,C,H,W]) with kernel
    ``k`` ([C_out, C_in/groups, h, w])."""
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or k.ndim != 4:
        raise DimensionError("conv2d expects rank-3/4 input and rank-4 kernel")
    n, cin, height, width = xd.shape
    cout, cg, kh, kw = k.data.shape
    s, p, g = spec.stride, spec.padding, spec.groups
    ho, wo = _conv_geometry(xd.shape, k.data.shape, spec)
    if (kh, kw, s, p, g) == (1, 1, 1, 0, 1):
        return _conv1x1(x, k, squeeze, xd)
    if g == cin == cout:
        return _conv_depthwise(x, k, spec, squeeze, xd)

    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    # [N, Cin, Ho, Wo, kh, kw] -> [N, G, (Cin/G)*kh*kw, Ho*Wo]
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(
        n, g, cg * kh * kw, ho * wo)
    kr = k.data.reshape(g, cout // g, cg * kh * kw)
    out = np.matmul(kr, cols).reshape(n, cout, ho, wo)
    if squeeze:
        out = out[0]

    def backward(grad):
        go = (grad[None] if squeeze else grad).reshape(n, g, cout // g, ho * wo)
        if k.requires_grad:
            gk = np.matmul(go, cols.transpose(0, 1, 3, 2)).sum(axis=0)
            _accumulate(k, gk.reshape(k.data.shape))
        if x.requires_grad:
            gcols = np.matmul(kr.transpose(0, 2, 1), go)
            gwin = gcols.reshape(n, cin, kh, kw, ho, wo)
            hp = height + 2 * p
            wp = width + 2 * p
            gxp = np.zeros((n, cin, hp, wp), dtype=grad.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += gwin[:, :, i, j]
            gx = gxp[:, :, p:p + height, p:p + width] if p else gxp
            _accumulate(x, gx[0] if squeeze else gx)

    return _make(out, (x, k), backward)


def pixel_shuffle(x, r):
    """Depth-to-space: [r^2*C, H, W] -> [C, r*H, r*W] (leading batch axis
    allowed).  A pure permutation of elements."""
    if r < 1:
        raise ValueError("upscale factor must be positive")
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    n, c_full, height, width = xd.shape
    if c_full % (r * r):
        raise DimensionError(f"channels {c_full} not divisible by r^2={r * r}")
    c = c_full // (r * r)
    data = xd.reshape(n, c, r, r, height, width).transpose(0, 1, 4, 2, 5, 3)
    data = np.ascontiguousarray(data).reshape(n, c, height * r, width * r)
    if squeeze:
        data = data[0]

    def backward(grad):
        gd = grad[None] if squeeze else grad
        gd = gd.reshape(n, c, height, r, width, r).transpose(0, 1, 3, 5, 2, 4)
        gd = np.ascontiguousarray(gd).reshape(n, c_full, height, width)
        _accumulate(x, gd[0] if squeeze else gd)

    return _make(data, (x,), backward)


# ---------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------

def _channel_axis(x):
    if x.ndim == 3:
        return 0
    if x.ndim == 4:
        return 1
    raise DimensionError("expected a rank-3 or rank-4 feature map")


def layer_norm_channels(x, gamma, beta, eps=1e-6):
    """Normalize over the channel axis at every spatial location, then
    apply a per-channel affine transform."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    ax = _channel_axis(x)
    d = x.data
    mu = d.mean(axis=ax, keepdims=True)
    var = d.var(axis=ax, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (d - mu) * inv
    gshape = [1] * d.ndim
    gshape[ax] = -1
    gview = gamma.data.reshape(gshape)
    bview = beta.data.reshape(gshape)
    data = (gview * xhat + bview).astype(d.dtype, copy=False)
    c = d.shape[ax]
    red = tuple(i for i in range(d.ndim) if i != ax)

    def backward(grad):
        _accumulate(gamma, (grad * xhat).sum(axis=red))
        _accumulate(beta, grad.sum(axis=red))
        if x.requires_grad:
            gx_hat = grad * gview
            m1 = gx_hat.mean(axis=ax, keepdims=True)
            m2 = (gx_hat * xhat).mean(axis=ax, keepdims=True)
            _accumulate(x, inv * (gx_hat - m1 - xhat * m2))

    return _make(data, (x, gamma, beta), backward)


def grn(x, gamma, beta, eps=1e-6):
    """Global response normalization: the per-channel spatial L2 norm,
    divided by its mean over channels, gates the input;
    ``y = gamma * x * n/(mean(n)+eps) + beta + x``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    ax = _channel_axis(x)
    d = x.data
    if ax == 0:
        spatial = (1, 2)
        cshape = (-1, 1, 1)
    else:
        spatial = (2, 3)
        cshape = (1, -1, 1, 1)
    n = np.sqrt((d * d).sum(axis=spatial, keepdims=True))
    mu = n.mean(axis=ax, keepdims=True)
    g = n / (mu + eps)
    gview = gamma.data.reshape(cshape)
    bview = beta.data.reshape(cshape)
    data = (gview * (d * g) + bview + d).astype(d.dtype, copy=False)
    red = tuple(i for i in range(d.ndim) if i != ax)
    c = d.shape[ax]

    def backward(grad):
        _accumulate(gamma, (grad * d * g).sum(axis=red))
        _accumulate(beta, grad.sum(axis=red))
        if x.requires_grad:
            # direct path plus the path through n (and its channel mean)
            coeff = (grad * gview * d).sum(axis=spatial, keepdims=True)
            dn = coeff / (mu + eps) - (coeff * g).sum(axis=ax, keepdims=True) / (c * (mu + eps))
            safe_n = np.where(n > 0, n, 1.0)
            gx = grad * (gview * g + 1.0) + dn * np.where(n > 0, d / safe_n, 0.0)
            _accumulate(x, gx)

    return _make(data, (x, gamma, beta), backward)


# ---------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------

def grad_check(op, inputs, eps=1e-4):
    """Compare analytic gradients of ``sum(op(*inputs))`` against central
    finite differences, returning the largest relative error.

    Inputs are promoted to float64 copies with gradients enabled.
    """
    work = [Tensor(np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64).copy(),
                   requires_grad=True) for t in inputs]
    out = op(*work)
    out.backward(np.ones_like(out.data))
    name = getattr(op, "__name__", repr(op))
    analytic = []
    for t in work:
        if t.grad is None:
            analytic.append(np.zeros_like(t.data))
            continue
        if not np.all(np.isfinite(t.grad)):
            raise NumericError(f"non-finite gradient from op {name}")
        analytic.append(t.grad)

    max_rel = 0.0
    for t, ana in zip(work, analytic):
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(np.sum(op(*work).data))
            flat[i] = orig - eps
            f_minus = float(np.sum(op(*work).data))
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(ana.reshape(-1)[i])
            rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            if rel > max_rel:
                max_rel = rel
    return max_rel
