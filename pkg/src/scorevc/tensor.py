"""Dense tensors with reverse-mode automatic differentiation.

Only the operations the score network needs are provided. Shapes must match
exactly; the sole broadcasts are per-channel bias/affine terms.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, ValidationError

BN_EPS = 1e-5

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-dimensional float array that can take part in differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def backward(self):
        backward(self)


def _result(data, parents, backward_fn, op):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.op = op
    return out


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.dtype, copy=True)
    else:
        t.grad += g


def _check_same_shape(a, b, what):
    if a.shape != b.shape:
        axis = None
        if len(a.shape) == len(b.shape):
            axis = next(i for i, (p, q) in enumerate(zip(a.shape, b.shape)) if p != q)
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ", axis=axis)


# ---------------------------------------------------------------------------
# Tape and backward pass


@dataclass
class Tape:
    """Recorded operations in topological order (inputs before outputs)."""

    nodes: list = field(default_factory=list)

    @classmethod
    def from_output(cls, out):
        order, seen = [], set()
        stack = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def leaves(self):
        return [n for n in self.nodes if not n._parents]


def backward(loss):
    """Fill ``.grad`` of every leaf reachable from the scalar ``loss``."""
    if loss.data.size != 1:
        raise ValidationError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValidationError("loss is not connected to any tensor that requires grad")
    tape = Tape.from_output(loss)
    for node in tape.nodes:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    # interior buffers are not needed after the sweep
    for node in tape.nodes:
        if node._parents:
            node.grad = None
    return tape


# ---------------------------------------------------------------------------
# Elementwise and reductions


def add(a, b):
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    if b.data.ndim == 0:
        return _result(a.data + b.data, (a, b),
                       lambda g: (_accumulate(a, g), _accumulate(b, g.sum())), "add")
    _check_same_shape(a, b, "add")

    def _bw(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _result(a.data + b.data, (a, b), _bw, "add")


def sub(a, b):
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _check_same_shape(a, b, "sub")

    def _bw(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _result(a.data - b.data, (a, b), _bw, "sub")


def mul(a, b):
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    if b.data.ndim == 0:
        return _result(a.data * b.data, (a, b),
                       lambda g: (_accumulate(a, g * b.data), _accumulate(b, (g * a.data).sum())),
                       "mul")
    _check_same_shape(a, b, "mul")

    def _bw(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _result(a.data * b.data, (a, b), _bw, "mul")


def square(x):
    return _result(x.data * x.data, (x,), lambda g: _accumulate(x, 2.0 * x.data * g), "square")


def tsum(x):
    return _result(x.data.sum(), (x,), lambda g: _accumulate(x, np.broadcast_to(g, x.shape)), "sum")


def tmean(x):
    n = x.data.size
    return _result(x.data.mean(), (x,),
                   lambda g: _accumulate(x, np.broadcast_to(g / n, x.shape)), "mean")


def _sigmoid(v):
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def sigmoid(x):
    s = _sigmoid(x.data)
    return _result(s, (x,), lambda g: _accumulate(x, g * s * (1.0 - s)), "sigmoid")


def glu(x):
    """First channel half times the sigmoid of the second half."""
    if x.ndim < 2 or x.shape[1] % 2:
        raise ShapeError(f"glu needs an even channel count, got shape {x.shape}", axis=1)
    c = x.shape[1] // 2
    x1, x2 = x.data[:, :c], x.data[:, c:]
    gate = _sigmoid(x2)

    def _bw(g):
        gx = np.empty_like(x.data)
        gx[:, :c] = g * gate
        gx[:, c:] = g * x1 * gate * (1.0 - gate)
        _accumulate(x, gx)

    return _result(x1 * gate, (x,), _bw, "glu")


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        for ax, (p, q) in enumerate(zip(ref, t.shape)):
            if ax != axis and p != q:
                raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off the join axis", axis=ax)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def _bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accumulate(t, g[tuple(idx)])

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, _bw, "concat")


def add_bias(x, bias):
    """Add a per-channel bias to a [b, c, h, w] tensor."""
    if bias.shape != (x.shape[1],):
        raise ShapeError(f"bias of shape {bias.shape} does not match {x.shape[1]} channels", axis=1)

    def _bw(g):
        _accumulate(x, g)
        _accumulate(bias, g.sum(axis=(0, 2, 3)))

    return _result(x.data + bias.data[None, :, None, None], (x, bias), _bw, "add_bias")


# ---------------------------------------------------------------------------
# Convolutions


def _pair(v):
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _conv_out_size(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def _windows(xp, kh, kw, sh, sw, oh, ow):
    # [b, c, oh, ow, kh, kw] strided view, no copy
    view = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return view[:, :, : sh * (oh - 1) + 1 : sh, : sw * (ow - 1) + 1 : sw]


def _pad(x, ph, pw):
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _conv_forward(x, w, stride, padding):
    sh, sw = stride
    ph, pw = padding
    kh, kw = w.shape[2:]
    oh = _conv_out_size(x.shape[2], kh, sh, ph)
    ow = _conv_out_size(x.shape[3], kw, sw, pw)
    cols = _windows(_pad(x, ph, pw), kh, kw, sh, sw, oh, ow)
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))  # [b, oh, ow, o]
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv_input_grad(g, w, in_shape, stride, padding):
    """Adjoint of ``_conv_forward`` with respect to its input."""
    sh, sw = stride
    ph, pw = padding
    kh, kw = w.shape[2:]
    b, c, h, wd = in_shape
    oh, ow = g.shape[2:]
    dcols = np.tensordot(g, w, axes=([1], [0]))  # [b, oh, ow, c, kh, kw]
    gp = np.zeros((b, c, h + 2 * ph, wd + 2 * pw), dtype=g.dtype)
    for p in range(kh):
        for q in range(kw):
            gp[:, :, p : p + sh * (oh - 1) + 1 : sh, q : q + sw * (ow - 1) + 1 : sw] += (
                dcols[:, :, :, :, p, q].transpose(0, 3, 1, 2)
            )
    return gp[:, :, ph : ph + h, pw : pw + wd]


def _conv_weight_grad(x, g, w_shape, stride, padding):
    sh, sw = stride
    ph, pw = padding
    kh, kw = w_shape[2:]
    oh, ow = g.shape[2:]
    cols = _windows(_pad(x, ph, pw), kh, kw, sh, sw, oh, ow)
    return np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))  # [o, c, kh, kw]


def _check_conv_shapes(x, kernel, in_channel_axis, name, stride, padding):
    if x.ndim != 4:
        raise ShapeError(f"{name}: input must be 4-D [b, c, h, w], got {x.shape}")
    if kernel.ndim != 4:
        raise ShapeError(f"{name}: kernel must be 4-D, got {kernel.shape}")
    if x.shape[1] != kernel.shape[in_channel_axis]:
        raise ShapeError(
            f"{name}: input has {x.shape[1]} channels but kernel expects {kernel.shape[in_channel_axis]}",
            axis=1,
        )
    if min(stride) < 1 or min(padding) < 0:
        raise ValidationError(f"{name}: stride must be >= 1 and padding >= 0")


def conv2d(x, kernel, bias=None, stride=1, padding=0):
    """Cross-correlation of ``x`` [b, c, h, w] with ``kernel`` [c_out, c, kh, kw]."""
    stride, padding = _pair(stride), _pair(padding)
    _check_conv_shapes(x, kernel, 1, "conv2d", stride, padding)
    for axis, n, k, p in ((2, x.shape[2], kernel.shape[2], padding[0]), (3, x.shape[3], kernel.shape[3], padding[1])):
        if k > n + 2 * p:
            raise ShapeError(f"conv2d: kernel extent {k} exceeds padded input extent {n + 2 * p} on axis {axis}",
                             axis=axis)
    out = _conv_forward(x.data, kernel.data, stride, padding)

    def _bw(g):
        if x.requires_grad:
            _accumulate(x, _conv_input_grad(g, kernel.data, x.shape, stride, padding))
        if kernel.requires_grad:
            _accumulate(kernel, _conv_weight_grad(x.data, g, kernel.shape, stride, padding))

    y = _result(out, (x, kernel), _bw, "conv2d")
    return add_bias(y, bias) if bias is not None else y


def deconv2d(x, kernel, bias=None, stride=1, padding=0):
    """Transposed convolution; ``kernel`` is [c_in, c_out, kh, kw].

    Equals the input-gradient of ``conv2d`` with the same kernel, so the
    output extent is ``(n - 1) * stride - 2 * padding + k``.
    """
    stride, padding = _pair(stride), _pair(padding)
    _check_conv_shapes(x, kernel, 0, "deconv2d", stride, padding)
    kh, kw = kernel.shape[2:]
    b, _, h, w = x.shape
    oh = (h - 1) * stride[0] - 2 * padding[0] + kh
    ow = (w - 1) * stride[1] - 2 * padding[1] + kw
    if oh < 1 or ow < 1:
        raise ShapeError(f"deconv2d: padding {padding} leaves an empty output", axis=2 if oh < 1 else 3)
    out = _conv_input_grad(x.data, kernel.data, (b, kernel.shape[1], oh, ow), stride, padding)
    out = np.ascontiguousarray(out)

    def _bw(g):
        if x.requires_grad:
            _accumulate(x, _conv_forward(g, kernel.data, stride, padding))
        if kernel.requires_grad:
            _accumulate(kernel, _conv_weight_grad(g, x.data, kernel.shape, stride, padding))

    y = _result(out, (x, kernel), _bw, "deconv2d")
    return add_bias(y, bias) if bias is not None else y


# ---------------------------------------------------------------------------
# Normalization


def batch_stats(x, eps=BN_EPS):
    """Per-channel mean and sqrt(population variance + eps) over batch, height, width."""
    axes = (0, 2, 3)
    n = x.data.size // x.shape[1]
    mu = x.data.mean(axis=axes)
    centered = x.data - mu[None, :, None, None]
    sd = np.sqrt((centered**2).mean(axis=axes) + eps)

    mean_t = _result(mu, (x,), lambda g: _accumulate(x, np.broadcast_to(g[None, :, None, None] / n, x.shape)),
                     "batch_mean")
    std_t = _result(sd, (x,),
                    lambda g: _accumulate(x, centered * (g / (n * sd))[None, :, None, None]),
                    "batch_std")
    return mean_t, std_t


def normalize(x, mean, std):
    """``(x - mean[c]) / std[c]`` for a [b, c, h, w] tensor."""
    c = x.shape[1]
    if mean.shape != (c,) or std.shape != (c,):
        raise ShapeError(f"normalize: statistics must have shape ({c},)", axis=1)
    m = mean.data[None, :, None, None]
    s = std.data[None, :, None, None]
    y = (x.data - m) / s

    def _bw(g):
        _accumulate(x, g / s)
        _accumulate(mean, -(g / s).sum(axis=(0, 2, 3)))
        _accumulate(std, -(g * y / s).sum(axis=(0, 2, 3)))

    return _result(y, (x, mean, std), _bw, "normalize")


def gathered_affine(x, gamma, beta, rows_l, rows_k):
    """Per-item affine ``gamma[l_b, k_b, c] * x + beta[l_b, k_b, c]``.

    ``gamma`` and ``beta`` are [L, K, C] tables; ``rows_l``/``rows_k`` are
    zero-based integer arrays of length b.
    """
    b, c = x.shape[:2]
    if gamma.ndim != 3 or gamma.shape[2] != c or beta.shape != gamma.shape:
        raise ShapeError(f"affine tables {gamma.shape}/{beta.shape} do not match {c} channels", axis=1)
    rows_l = np.asarray(rows_l)
    rows_k = np.asarray(rows_k)
    gsel = gamma.data[rows_l, rows_k][:, :, None, None]
    bsel = beta.data[rows_l, rows_k][:, :, None, None]

    def _bw(g):
        _accumulate(x, g * gsel)
        if gamma.requires_grad:
            dg = np.zeros_like(gamma.data)
            np.add.at(dg, (rows_l, rows_k), (g * x.data).sum(axis=(2, 3)))
            _accumulate(gamma, dg)
        if beta.requires_grad:
            db = np.zeros_like(beta.data)
            np.add.at(db, (rows_l, rows_k), g.sum(axis=(2, 3)))
            _accumulate(beta, db)

    return _result(gsel * x.data + bsel, (x, gamma, beta), _bw, "gathered_affine")
