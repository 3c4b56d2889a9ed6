"""Dense tensor kernels: forward primitives and their adjoints.

Tensors are plain numpy arrays. Storage is float32 by default, but every
kernel preserves the dtype of its inputs so that gradient oracles can run
the same code in float64. Feature maps are ``[C, H, W]``; token matrices are
``[N, D]``. There is no batch axis.
"""

from __future__ import annotations

import contextvars
import math
from dataclasses import dataclass

import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# instrumentation


class Probe:
    """Counts multiplies issued by conv2d/matmul and the largest attention
    score matrix materialised while active."""

    def __init__(self):
        self.macs = 0
        self.peak_scores = 0

    def add_macs(self, n):
        self.macs += int(n)

    def note_scores(self, n):
        self.peak_scores = max(self.peak_scores, int(n))


_probe: contextvars.ContextVar[Probe | None] = contextvars.ContextVar("probe", default=None)


class probe:
    """``with probe() as p: ...`` collects a :class:`Probe`."""

    def __enter__(self) -> Probe:
        self._p = Probe()
        self._token = _probe.set(self._p)
        return self._p

    def __exit__(self, *exc):
        _probe.reset(self._token)
        return False


def active_probe() -> Probe | None:
    return _probe.get()


# ---------------------------------------------------------------------------
# convolution


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (1, 1)
    stride: tuple[int, int] = (1, 1)
    dilation: tuple[int, int] = (1, 1)
    groups: int = 1
    padding: tuple[int, int] = (0, 0)
    has_bias: bool = True

    def __post_init__(self):
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ShapeError(
                f"channels ({self.in_channels}->{self.out_channels}) not divisible by groups={self.groups}"
            )
        if min(self.kernel + self.stride + self.dilation) < 1:
            raise ShapeError(f"kernel/stride/dilation must be >= 1: {self}")

    @classmethod
    def same(cls, cin, cout, kernel=(3, 3), dilation=(1, 1), groups=1, stride=(1, 1), has_bias=True):
        """Zero padding that preserves spatial extent at stride 1."""
        pad = tuple(d * (k - 1) // 2 for k, d in zip(kernel, dilation))
        return cls(cin, cout, tuple(kernel), tuple(stride), tuple(dilation), groups, pad, has_bias)

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups) + tuple(self.kernel)

    @property
    def num_params(self) -> int:
        kh, kw = self.kernel
        n = self.out_channels * (self.in_channels // self.groups) * kh * kw
        return n + (self.out_channels if self.has_bias else 0)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        out = []
        for n, k, s, d, p, axis in zip((h, w), self.kernel, self.stride, self.dilation, self.padding, "HW"):
            o = (n + 2 * p - d * (k - 1) - 1) // s + 1
            if o < 1:
                raise ShapeError(f"conv output extent along {axis} is {o} for input {n} with {self}")
            out.append(o)
        return out[0], out[1]

    def macs(self, h: int, w: int) -> int:
        ho, wo = self.output_hw(h, w)
        kh, kw = self.kernel
        return (self.in_channels // self.groups) * self.out_channels * kh * kw * ho * wo


def _check_conv(x, w, b, spec: ConvSpec):
    if x.ndim != 3:
        raise ShapeError(f"conv2d input must be [C,H,W], got shape {x.shape}")
    if x.shape[0] != spec.in_channels:
        raise ShapeError(f"conv2d input channel axis is {x.shape[0]}, spec expects {spec.in_channels}")
    if w.shape != spec.weight_shape:
        raise ShapeError(f"conv2d weight shape {w.shape} != {spec.weight_shape}")
    if b is not None and b.shape != (spec.out_channels,):
        raise ShapeError(f"conv2d bias shape {b.shape} != ({spec.out_channels},)")


def _taps(spec: ConvSpec, ho, wo):
    kh, kw = spec.kernel
    sh, sw = spec.stride
    dh, dw = spec.dilation
    for i in range(kh):
        for j in range(kw):
            r0, c0 = i * dh, j * dw
            rows = slice(r0, r0 + sh * (ho - 1) + 1, sh)
            cols = slice(c0, c0 + sw * (wo - 1) + 1, sw)
            yield i, j, rows, cols


def conv2d(x, w, b, spec: ConvSpec):
    """Cross-correlation with zero padding, stride, dilation and groups."""
    _check_conv(x, w, b, spec)
    cin, h, wd = x.shape
    ho, wo = spec.output_hw(h, wd)
    ph, pw = spec.padding
    g = spec.groups
    cout = spec.out_channels
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    dtype = np.result_type(x, w)
    out = np.zeros((cout, ho, wo), dtype=dtype)
    depthwise = g == cin and cout == cin
    if depthwise:
        for i, j, rows, cols in _taps(spec, ho, wo):
            out += w[:, 0, i, j][:, None, None] * xp[:, rows, cols]
    elif g == 1 and spec.kernel == (1, 1) and spec.stride == (1, 1):
        out = (w[:, :, 0, 0] @ xp.reshape(cin, -1)).reshape(cout, ho, wo)
    else:
        og = out.reshape(g, cout // g, ho * wo)
        for i, j, rows, cols in _taps(spec, ho, wo):
            xs = np.ascontiguousarray(xp[:, rows, cols]).reshape(g, cin // g, ho * wo)
            og += w[:, :, i, j].reshape(g, cout // g, cin // g) @ xs
    if b is not None:
        out += b[:, None, None]
    p = active_probe()
    if p is not None:
        p.add_macs(out.size * w.shape[1] * w.shape[2] * w.shape[3])
    return out


def conv2d_backward(x, w, spec: ConvSpec, gout):
    """Adjoints of :func:`conv2d` with respect to input, weight and bias."""
    cin, h, wd = x.shape
    ho, wo = gout.shape[1:]
    ph, pw = spec.padding
    g = spec.groups
    cout = spec.out_channels
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    gxp = np.zeros(xp.shape, dtype=np.result_type(x, gout))
    gw = np.zeros(w.shape, dtype=np.result_type(w, gout))
    depthwise = g == cin and cout == cin
    if depthwise:
        for i, j, rows, cols in _taps(spec, ho, wo):
            gxp[:, rows, cols] += w[:, 0, i, j][:, None, None] * gout
            gw[:, 0, i, j] = np.einsum("chw,chw->c", gout, xp[:, rows, cols])
    else:
        gg = gout.reshape(g, cout // g, ho * wo)
        for i, j, rows, cols in _taps(spec, ho, wo):
            xs = np.ascontiguousarray(xp[:, rows, cols]).reshape(g, cin // g, ho * wo)
            wt = w[:, :, i, j].reshape(g, cout // g, cin // g)
            gxp[:, rows, cols] += (wt.transpose(0, 2, 1) @ gg).reshape(cin, ho, wo)
            gw[:, :, i, j] = (gg @ xs.transpose(0, 2, 1)).reshape(cout, cin // g)
    gx = gxp[:, ph:ph + h, pw:pw + wd]
    gb = gout.sum(axis=(1, 2)) if spec.has_bias else None
    return np.ascontiguousarray(gx), gw, gb


# ---------------------------------------------------------------------------
# dense algebra


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    p = active_probe()
    if p is not None:
        p.add_macs(a.shape[0] * a.shape[1] * b.shape[1])
    return a @ b


def _axis(x, axis):
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for rank {x.ndim}")
    return axis % x.ndim


def softmax(x, axis=-1):
    axis = _axis(x, axis)
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(y, gout, axis=-1):
    return y * (gout - (gout * y).sum(axis=axis, keepdims=True))


def global_avg_pool_spatial(x):
    return x.mean(axis=(1, 2), keepdims=True)


def channel_mean_map(x):
    return x.mean(axis=0, keepdims=True)


def channel_shuffle(x, groups):
    c = x.shape[0]
    if c % groups:
        raise ShapeError(f"channel_shuffle: {c} channels not divisible by groups={groups}")
    rest = x.shape[1:]
    return x.reshape((groups, c // groups) + rest).swapaxes(0, 1).reshape(x.shape)


def shuffle_permutation(channels, groups):
    """Source channel index for each output channel of :func:`channel_shuffle`."""
    return np.arange(channels).reshape(groups, channels // groups).T.reshape(-1)


def interp_matrix(n_in, n_out, dtype=DTYPE):
    """Row-stochastic [n_out, n_in] bilinear weights (align_corners=False)."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1)
        lo = int(math.floor(src))
        hi = min(lo + 1, n_in - 1)
        t = src - lo
        m[i, lo] += 1.0 - t
        m[i, hi] += t
    return m.astype(dtype)


def bilinear_upsample(x, size):
    c, h, w = x.shape
    ho, wo = size
    if ho < h or wo < w:
        raise ShapeError(f"bilinear_upsample only enlarges: ({h},{w}) -> ({ho},{wo})")
    if (ho, wo) == (h, w):
        return x.copy()
    ry = interp_matrix(h, ho, x.dtype)
    rx = interp_matrix(w, wo, x.dtype)
    return np.einsum("ph,chw,qw->cpq", ry, x, rx, optimize=True)


def bilinear_upsample_backward(gout, in_hw):
    h, w = in_hw
    ho, wo = gout.shape[1:]
    if (ho, wo) == (h, w):
        return gout.copy()
    ry = interp_matrix(h, ho, gout.dtype)
    rx = interp_matrix(w, wo, gout.dtype)
    return np.einsum("ph,cpq,qw->chw", ry, gout, rx, optimize=True)


# ---------------------------------------------------------------------------
# activations

_GELU_C = math.sqrt(2.0 / math.pi)


def relu(x):
    return np.maximum(x, 0)


def prelu(x, slope):
    if slope.shape != (x.shape[0],):
        raise ShapeError(f"prelu slope length {slope.shape} does not match channel extent {x.shape[0]}")
    s = slope.reshape((-1,) + (1,) * (x.ndim - 1))
    return np.where(x > 0, x, s * x)


def sigmoid(x):
    # two-branch form keeps both tails strictly inside (0, 1) as long as exp does
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(np.result_type(x, DTYPE), copy=False)


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x ** 3)))


def gelu_grad(x):
    u = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du


def activation(x, kind, slope=None):
    if kind == "relu":
        return relu(x)
    if kind == "prelu":
        return prelu(x, slope)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "gelu":
        return gelu(x)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# elementwise and layout


def broadcast_shape(a_shape, b_shape):
    if len(a_shape) != len(b_shape):
        raise ShapeError(f"rank mismatch for elementwise op: {a_shape} vs {b_shape}")
    out = []
    for i, (m, n) in enumerate(zip(a_shape, b_shape)):
        if m != n and 1 not in (m, n):
            raise ShapeError(f"cannot broadcast axis {i}: {a_shape} vs {b_shape}")
        out.append(max(m, n))
    return tuple(out)


def elementwise(a, b, op):
    broadcast_shape(a.shape, b.shape)
    if op == "add":
        return a + b
    if op == "mul":
        return a * b
    raise ValueError(f"unknown elementwise op {op!r}")


def unbroadcast(g, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    axes = tuple(i for i, (m, n) in enumerate(zip(g.shape, shape)) if n == 1 and m != 1)
    return g.sum(axis=axes, keepdims=True) if axes else g


def reshape(x, shape):
    shape = tuple(shape)
    if math.prod(shape) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} ({x.size} elements) to {shape}")
    return x.reshape(shape)


def transpose2d(x):
    if x.ndim != 2:
        raise ShapeError(f"transpose2d expects a matrix, got {x.shape}")
    return np.ascontiguousarray(x.T)


def concat(xs, axis=0):
    ref = xs[0].shape
    axis = _axis(xs[0], axis)
    for x in xs[1:]:
        if x.ndim != len(ref) or any(x.shape[i] != ref[i] for i in range(len(ref)) if i != axis):
            raise ShapeError(f"concat extents incompatible on axis {axis}: {ref} vs {x.shape}")
    return np.concatenate(xs, axis=axis)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalise each row of ``[N, D]`` over D."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    return xhat * gamma + beta, xhat, inv


def layer_norm_backward(gout, xhat, inv, gamma):
    d = xhat.shape[-1]
    gx_hat = gout * gamma
    gx = inv / d * (d * gx_hat - gx_hat.sum(-1, keepdims=True) - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
    return gx, (gout * xhat).sum(0), gout.sum(0)
