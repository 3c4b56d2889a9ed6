"""Correlation-weighted fusion of transformer tokens with CNN features."""

from __future__ import annotations

from . import autodiff as ad
from .efficient_transformer import TokenGrid, unpatchify
from .layers import conv
from .tensor_core import ConvSpec, ShapeError

FUSION_KINDS = ("cwf", "add", "concat")


def fusion_ledger(channels, kind="cwf"):
    """Parameters for fusing two ``channels``-wide maps.

    ``concat`` uses a dense 3x3 conv over the stacked maps.
    """
    if kind == "cwf":
        cg = 2 * channels
        return {
            "dw": ConvSpec.same(cg, cg, (3, 3), groups=cg),
            "reduce": ConvSpec.same(cg, channels, (1, 1)),
            "post": ConvSpec.same(channels, channels, (1, 1)),
        }
    if kind == "add":
        return {}
    if kind == "concat":
        return {"mix": ConvSpec.same(2 * channels, channels, (3, 3))}
    raise ValueError(f"unknown fusion kind {kind!r}; expected one of {FUSION_KINDS}")


def reshape_tokens_to_map(t: TokenGrid, channels, patch, target_hw):
    """Un-flatten tokens to ``[C_t, H_t, W_t]`` and resize to ``target_hw``."""
    m = unpatchify(t.tokens, t.grid, channels, patch)
    if tuple(m.shape[1:]) == tuple(target_hw):
        return m
    return ad.bilinear_upsample(m, target_hw)


def correlation_weights(t_map, f, p: ad.Params):
    """Channel gate ``M`` of shape ``[C, 1, 1]``, strictly inside (0, 1)."""
    led = fusion_ledger(f.shape[0], "cwf")
    g = ad.concat([t_map, f], axis=0)
    g = conv(p, "dw", g, led["dw"])
    g = conv(p, "reduce", g, led["reduce"])
    g = ad.global_avg_pool_spatial(g)
    return ad.sigmoid(conv(p, "post", g, led["post"]))


def cwf(t_map, f, p: ad.Params):
    t_map, f = ad.const(t_map), ad.const(f)
    _check_pair(t_map, f)
    m = correlation_weights(t_map, f, p)
    return ad.relu(ad.add(ad.mul(t_map, m), ad.mul(f, m)))


def fuse(t_map, f, p: ad.Params, kind="cwf"):
    t_map, f = ad.const(t_map), ad.const(f)
    _check_pair(t_map, f)
    if kind == "cwf":
        return cwf(t_map, f, p)
    if kind == "add":
        return ad.relu(ad.add(t_map, f))
    if kind == "concat":
        led = fusion_ledger(f.shape[0], "concat")
        return conv(p, "mix", ad.concat([t_map, f], axis=0), led["mix"])
    raise ValueError(f"unknown fusion kind {kind!r}; expected one of {FUSION_KINDS}")


def _check_pair(t_map, f):
    if t_map.shape[0] != f.shape[0]:
        raise ShapeError(f"fusion needs equal channel counts, got {t_map.shape[0]} and {f.shape[0]}")
    if t_map.shape[1:] != f.shape[1:]:
        raise ShapeError(f"fusion needs equal spatial extents, got {t_map.shape[1:]} and {f.shape[1:]}")
