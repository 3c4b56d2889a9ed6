"""Hierarchy-aware pixel-excitation block and its ablation relatives.

``kind`` selects the variant:

* ``"hape"`` - four factorized branches, each followed by pixel excitation
* ``"hm"``   - the same branches with pixel excitation replaced by identity
* ``"rm"``   - single dense factorized 3x3 residual module (baseline)
"""

from __future__ import annotations

from . import autodiff as ad
from .layers import VectorSpec, conv
from .tensor_core import ConvSpec, ShapeError

BRANCH_KERNELS = (3, 3, 5, 7)
SHUFFLE_GROUPS = 4
PRELU_INIT = 0.25
KINDS = ("hape", "hm", "rm")


def hape_ledger(channels, dilation=1, kind="hape"):
    """Ordered parameter ledger of one block with ``channels`` in and out."""
    if kind not in KINDS:
        raise ValueError(f"unknown block kind {kind!r}; expected one of {KINDS}")
    if channels % 4:
        raise ShapeError(f"block channels {channels} must be divisible by 4")
    if dilation < 1:
        raise ValueError(f"dilation must be >= 1, got {dilation}")
    c = channels // 4
    led = {"reduce": ConvSpec.same(channels, c, (1, 1))}
    n_branches = 1 if kind == "rm" else 4
    for i, k in enumerate(BRANCH_KERNELS[:n_branches], start=1):
        if i == 1:
            # dense pair, never dilated
            led[f"b{i}.v"] = ConvSpec.same(c, c, (3, 1))
            led[f"b{i}.h"] = ConvSpec.same(c, c, (1, 3))
        else:
            led[f"b{i}.v"] = ConvSpec.same(c, c, (k, 1), dilation=(dilation, 1), groups=c)
            led[f"b{i}.h"] = ConvSpec.same(c, c, (1, k), dilation=(1, dilation), groups=c)
        led[f"b{i}.act"] = VectorSpec(c, PRELU_INIT)
        if kind == "hape":
            led[f"b{i}.pem"] = VectorSpec(c, PRELU_INIT)
    if kind != "rm":
        led["act"] = VectorSpec(c, PRELU_INIT)
    led["expand"] = ConvSpec.same(c, channels, (1, 1))
    return led


def pem_forward(x, slope):
    """Pixel excitation: softmax over positions of the channel-mean map,
    used to gate ``x`` with a residual, then PReLU."""
    x = ad.const(x)
    a = pem_attention(x)
    return ad.prelu(ad.add(ad.mul(x, a), x), slope)


def pem_attention(x):
    """Spatial attention map ``[1, h, w]``; non-negative, sums to one."""
    x = ad.const(x)
    _, h, w = x.shape
    x1 = ad.reshape(ad.channel_mean_map(x), (1, h * w))
    return ad.reshape(ad.softmax(x1, axis=1), (1, h, w))


def hape_forward(x, p: ad.Params, dilation=1, kind="hape"):
    x = ad.const(x)
    channels = x.shape[0]
    led = hape_ledger(channels, dilation, kind)
    xr = conv(p, "reduce", x, led["reduce"])
    n_branches = 1 if kind == "rm" else 4
    total = None
    for i in range(1, n_branches + 1):
        li = conv(p, f"b{i}.v", xr, led[f"b{i}.v"])
        li = conv(p, f"b{i}.h", li, led[f"b{i}.h"])
        li = ad.prelu(li, p[f"b{i}.act"])
        if kind == "hape":
            li = pem_forward(li, p[f"b{i}.pem"])
        total = li if total is None else ad.add(total, li)
    if kind != "rm":
        total = ad.prelu(total, p["act"])
    y = ad.add(conv(p, "expand", total, led["expand"]), x)
    if kind == "rm":
        return y
    return ad.channel_shuffle(y, SHUFFLE_GROUPS)


def rm_forward(x, p: ad.Params):
    return hape_forward(x, p, 1, "rm")
