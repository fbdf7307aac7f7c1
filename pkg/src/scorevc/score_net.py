"""Noise-level and speaker conditional U-Net score network.

Feature sequences are treated as single-channel images of height D (cepstral
axis) and width M (time). Every encoder block halves the time axis with a
strided convolution followed by GLU and conditional batch norm; every decoder
block doubles it again with a transposed convolution and concatenates the
encoder activation of matching resolution. The outermost skip is the raw
input itself, and a final linear 1x1 convolution produces the score.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ParseError, ShapeError, ValidationError
from .tensor import Tensor

CHECKPOINT_MAGIC = b"SCORNET1"


@dataclass(frozen=True)
class ScoreNetConfig:
    feature_dim: int = 28
    noise_levels: int = 11
    speakers: int = 4
    base_channels: int = 32
    depth: int = 4
    max_channels: int = 256
    kernel_h: int = 3
    kernel_w: int = 4
    time_stride: int = 2
    dtype: str = "float64"

    def __post_init__(self):
        for name in ("feature_dim", "noise_levels", "speakers", "depth", "base_channels", "max_channels"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.kernel_h % 2 != 1:
            raise ValidationError("kernel_h must be odd so the cepstral axis keeps its size")
        if self.kernel_w < self.time_stride or (self.kernel_w - self.time_stride) % 2:
            raise ValidationError("kernel_w - time_stride must be even and non-negative")
        if self.dtype not in ("float32", "float64"):
            raise ValidationError(f"unsupported dtype {self.dtype!r}")

    @property
    def n_cond(self):
        return self.noise_levels + self.speakers

    @property
    def time_multiple(self):
        return self.time_stride**self.depth

    def widths(self):
        """Channel count after each encoder block, outermost first."""
        return [min(self.base_channels * 2**i, self.max_channels) for i in range(self.depth)]


@dataclass
class ScoreNetParams:
    """All learnable tensors of the network, kept in declaration order."""

    config: ScoreNetConfig
    tensors: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self):
        return list(self.tensors)

    def values(self):
        return list(self.tensors.values())

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def copy(self):
        return ScoreNetParams(
            self.config,
            {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.tensors.items()},
        )

    def num_parameters(self):
        return sum(t.data.size for t in self.tensors.values())


def _layer_shapes(cfg):
    """Yield (name, shape) for every parameter in declaration order."""
    c = cfg.n_cond
    kh, kw = cfg.kernel_h, cfg.kernel_w
    L, K = cfg.noise_levels, cfg.speakers
    widths = cfg.widths()
    in_ch = [1] + widths  # channels of encoder activations h_0 .. h_depth
    for i in range(cfg.depth):
        yield f"enc{i}.weight", (2 * widths[i], in_ch[i] + c, kh, kw)
        yield f"enc{i}.bias", (2 * widths[i],)
        yield f"enc{i}.gamma", (L, K, widths[i])
        yield f"enc{i}.beta", (L, K, widths[i])
    mid = widths[-1]
    yield "mid.weight", (2 * mid, mid + c, kh, kh)
    yield "mid.bias", (2 * mid,)
    yield "mid.gamma", (L, K, mid)
    yield "mid.beta", (L, K, mid)
    up_ch = mid
    for i in reversed(range(cfg.depth)):
        out_ch = widths[i - 1] if i > 0 else cfg.base_channels
        # transposed-conv kernel is [c_in, c_out, kh, kw]
        yield f"dec{i}.weight", (up_ch + c, 2 * out_ch, kh, kw)
        yield f"dec{i}.bias", (2 * out_ch,)
        yield f"dec{i}.gamma", (L, K, out_ch)
        yield f"dec{i}.beta", (L, K, out_ch)
        up_ch = out_ch + in_ch[i]
    yield "out.weight", (1, up_ch + c, 1, 1)
    yield "out.bias", (1,)


def _fan_in(name, shape):
    if name.startswith("dec"):
        return shape[0] * shape[2] * shape[3]
    return shape[1] * shape[2] * shape[3]


def init_params(config, rng):
    """Gaussian weights with std 1/sqrt(fan_in); gamma ones, beta and biases zero."""
    dtype = np.dtype(config.dtype)
    tensors = {}
    for name, shape in _layer_shapes(config):
        kind = name.rsplit(".", 1)[1]
        if kind == "weight":
            data = rng.standard_normal(shape) / np.sqrt(_fan_in(name, shape))
        elif kind == "gamma":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        tensors[name] = Tensor(data.astype(dtype), requires_grad=True)
    return ScoreNetParams(config, tensors)


# ---------------------------------------------------------------------------
# Building blocks


def _as_index_array(idx, upper, batch, what):
    arr = np.atleast_1d(np.asarray(idx))
    if arr.dtype.kind not in "iu":
        raise ValidationError(f"{what} index must be an integer, got {idx!r}")
    if arr.size == 1 and batch != 1:
        arr = np.full(batch, arr.item())
    if arr.shape != (batch,):
        raise ValidationError(f"{what} indices must be a scalar or have length {batch}")
    if arr.min() < 1 or arr.max() > upper:
        raise ValidationError(f"{what} index out of range 1..{upper}: {idx!r}")
    return arr.astype(np.intp)


def one_hot_planes(shape, l, k, L, K, dtype=np.float64):
    """Conditioning planes [b, L+K, h, w]: one-hot of l, then one-hot of k."""
    b, _, h, w = shape
    li = _as_index_array(l, L, b, "noise level")
    ki = _as_index_array(k, K, b, "speaker")
    planes = np.zeros((b, L + K, h, w), dtype=dtype)
    rows = np.arange(b)
    planes[rows, li - 1] = 1.0
    planes[rows, L + ki - 1] = 1.0
    return planes


def one_hot_condition(x, l, k, L, K):
    """Append the one-hot planes of (l, k) to ``x`` along the channel axis."""
    x = T.as_tensor(x)
    planes = one_hot_planes(x.shape, l, k, L, K, dtype=x.dtype)
    return T.concat([x, Tensor(planes)], axis=1)


def conditional_batch_norm(x, l, k, gamma, beta):
    """Batch-standardize each channel, then apply the (l, k) affine row.

    ``gamma``/``beta`` are [L, K, C] tables; ``l`` and ``k`` are 1-based,
    scalar or per batch item.
    """
    L, K = gamma.shape[:2]
    b = x.shape[0]
    li = _as_index_array(l, L, b, "noise level")
    ki = _as_index_array(k, K, b, "speaker")
    mean, std = T.batch_stats(x)
    return T.gathered_affine(T.normalize(x, mean, std), gamma, beta, li - 1, ki - 1)


def pad_time(x, depth, stride=2):
    """Right-pad the last axis by edge replication to a multiple of stride**depth."""
    x = np.asarray(x)
    m = x.shape[-1]
    mult = stride**depth
    target = -(-m // mult) * mult
    if target == m:
        return x, m
    widths = [(0, 0)] * (x.ndim - 1) + [(0, target - m)]
    return np.pad(x, widths, mode="edge"), m


def crop_time(x, length):
    return x[..., :length]


# ---------------------------------------------------------------------------
# Forward pass


def score_forward(params, x, l, k, drop_skips=()):
    """Evaluate s(x, l, k) for ``x`` of shape [b, 1, D, M].

    ``drop_skips`` lists decoder indices whose skip input is replaced by zeros
    (used to check the wiring).
    """
    cfg = params.config
    x = T.as_tensor(x)
    if x.ndim != 4 or x.shape[1] != 1:
        raise ShapeError(f"score_forward expects [b, 1, D, M], got {x.shape}", axis=1)
    if x.shape[2] != cfg.feature_dim:
        raise ShapeError(f"feature dimension {x.shape[2]} != configured {cfg.feature_dim}", axis=2)
    if x.shape[3] % cfg.time_multiple:
        raise ShapeError(
            f"time axis length {x.shape[3]} is not a multiple of {cfg.time_multiple}; pad it with pad_time",
            axis=3,
        )
    L, K = cfg.noise_levels, cfg.speakers
    b = x.shape[0]
    li = _as_index_array(l, L, b, "noise level")
    ki = _as_index_array(k, K, b, "speaker")
    p = params.tensors
    ph = cfg.kernel_h // 2
    pw = (cfg.kernel_w - cfg.time_stride) // 2
    stride = (1, cfg.time_stride)

    plane_cache = {}

    def cond(h):
        key = h.shape[2:]
        if key not in plane_cache:
            plane_cache[key] = Tensor(one_hot_planes(h.shape, li, ki, L, K, dtype=h.dtype))
        return T.concat([h, plane_cache[key]], axis=1)

    def block(h, prefix, op, **kw):
        z = op(cond(h), p[f"{prefix}.weight"], p[f"{prefix}.bias"], **kw)
        return conditional_batch_norm(T.glu(z), li, ki, p[f"{prefix}.gamma"], p[f"{prefix}.beta"])

    skips = [x]
    h = x
    for i in range(cfg.depth):
        h = block(h, f"enc{i}", T.conv2d, stride=stride, padding=(ph, pw))
        skips.append(h)
    h = block(h, "mid", T.conv2d, stride=1, padding=(ph, ph))
    for i in reversed(range(cfg.depth)):
        h = block(h, f"dec{i}", T.deconv2d, stride=stride, padding=(ph, pw))
        skip = skips[i]
        if i in drop_skips:
            skip = Tensor(np.zeros_like(skip.data))
        h = T.concat([h, skip], axis=1)
    return T.conv2d(cond(h), p["out.weight"], p["out.bias"])


def score_array(params, x, l, k):
    """Gradient-free evaluation on a numpy array of any time length.

    Accepts [D, M] or [b, 1, D, M]; pads the time axis internally and returns
    an array of the input's shape.
    """
    x = np.asarray(x, dtype=params.config.dtype)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None, None]
    xp, m = pad_time(x, params.config.depth, params.config.time_stride)
    with T.no_grad():
        out = score_forward(params, xp, l, k).data
    out = crop_time(out, m)
    return out[0, 0] if squeeze else out


# ---------------------------------------------------------------------------
# Checkpoint I/O


def save_checkpoint(path_or_file, params, extra=None):
    """Write params as SCORNET1: magic, length-prefixed JSON config, tensors.

    Each tensor is stored as: name length (u32) + UTF-8 name, ndim (u32),
    extents (u32 each), then little-endian float32 values. ``extra`` is any
    JSON-serializable metadata kept next to the network config.
    """
    header = {"config": asdict(params.config), "extra": extra or {}}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(params.tensors)))
    for name, t in params.tensors.items():
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", t.data.ndim))
        buf.write(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
        buf.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    data = buf.getvalue()
    if hasattr(path_or_file, "write"):
        path_or_file.write(data)
    else:
        with open(path_or_file, "wb") as fh:
            fh.write(data)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise ParseError(f"truncated checkpoint while reading {what}", offset=self.pos)
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def load_checkpoint(path_or_file):
    """Inverse of :func:`save_checkpoint`; returns (params, extra)."""
    if hasattr(path_or_file, "read"):
        data = path_or_file.read()
    else:
        with open(path_or_file, "rb") as fh:
            data = fh.read()
    r = _Reader(data)
    if r.take(len(CHECKPOINT_MAGIC), "magic") != CHECKPOINT_MAGIC:
        raise ParseError("bad checkpoint magic, expected SCORNET1", offset=0)
    blob = r.take(r.u32("config length"), "config block")
    try:
        header = json.loads(blob.decode("utf-8"))
        config = ScoreNetConfig(**header["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise ParseError(f"unreadable config block: {exc}", offset=12) from exc
    expected = list(_layer_shapes(config))
    count = r.u32("tensor count")
    if count != len(expected):
        raise ParseError(f"checkpoint holds {count} tensors, config implies {len(expected)}", offset=r.pos - 4)
    dtype = np.dtype(config.dtype)
    tensors = {}
    for want_name, want_shape in expected:
        start = r.pos
        name = r.take(r.u32("name length"), "tensor name").decode("utf-8")
        ndim = r.u32("ndim")
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim, "shape"))
        if name != want_name or tuple(shape) != tuple(want_shape):
            raise ParseError(f"tensor {name}{shape} does not match expected {want_name}{want_shape}", offset=start)
        n = int(np.prod(shape))
        arr = np.frombuffer(r.take(4 * n, f"tensor {name}"), dtype="<f4").reshape(shape)
        tensors[name] = Tensor(arr.astype(dtype), requires_grad=True)
    if r.pos != len(data):
        raise ParseError("trailing bytes after last tensor", offset=r.pos)
    return ScoreNetParams(config, tensors), header.get("extra", {})
