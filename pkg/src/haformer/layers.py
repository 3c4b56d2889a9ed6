"""Parameter ledgers shared by the blocks.

A ledger is an ordered ``{name: spec}`` mapping. Specs know their parameter
tensors, so initialisation, enumeration and cost accounting all read the
same source.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .tensor_core import DTYPE, ConvSpec


@dataclass(frozen=True)
class LinearSpec:
    """Token projection ``x @ W (+ b)`` with ``W`` stored as ``[in, out]``."""

    in_features: int
    out_features: int
    has_bias: bool = False

    @property
    def num_params(self):
        return self.in_features * self.out_features + (self.out_features if self.has_bias else 0)

    def macs(self, rows):
        return rows * self.in_features * self.out_features


@dataclass(frozen=True)
class VectorSpec:
    """Per-channel vector such as a PReLU slope or a norm scale."""

    length: int
    init: float = 0.0

    @property
    def num_params(self):
        return self.length


def tensor_shapes(name, spec):
    """``[(tensor_name, shape)]`` stored for one ledger entry."""
    if isinstance(spec, ConvSpec):
        out = [(name + ".weight", spec.weight_shape)]
        if spec.has_bias:
            out.append((name + ".bias", (spec.out_channels,)))
        return out
    if isinstance(spec, LinearSpec):
        out = [(name + ".weight", (spec.in_features, spec.out_features))]
        if spec.has_bias:
            out.append((name + ".bias", (spec.out_features,)))
        return out
    if isinstance(spec, VectorSpec):
        return [(name, (spec.length,))]
    raise TypeError(f"unknown spec {spec!r}")


def init_params(ledger, rng: np.random.Generator, prefix=""):
    """Kaiming-uniform (fan-in) weights, zero biases, vectors at their init."""
    store = {}
    for name, spec in ledger.items():
        full = prefix + name
        if isinstance(spec, ConvSpec):
            kh, kw = spec.kernel
            fan_in = spec.in_channels // spec.groups * kh * kw
            bound = math.sqrt(6.0 / fan_in)
            store[full + ".weight"] = rng.uniform(-bound, bound, spec.weight_shape).astype(DTYPE)
            if spec.has_bias:
                store[full + ".bias"] = np.zeros(spec.out_channels, DTYPE)
        elif isinstance(spec, LinearSpec):
            bound = math.sqrt(6.0 / spec.in_features)
            store[full + ".weight"] = rng.uniform(-bound, bound, (spec.in_features, spec.out_features)).astype(DTYPE)
            if spec.has_bias:
                store[full + ".bias"] = np.zeros(spec.out_features, DTYPE)
        elif isinstance(spec, VectorSpec):
            store[full] = np.full(spec.length, spec.init, DTYPE)
        else:
            raise TypeError(f"unknown spec {spec!r}")
    return store


def count_params(ledger):
    return sum(spec.num_params for spec in ledger.values())


def conv(p: ad.Params, name, x, spec: ConvSpec):
    return ad.conv2d(x, p[name + ".weight"], p[name + ".bias"] if spec.has_bias else None, spec)


def linear(p: ad.Params, name, x, spec: LinearSpec):
    y = ad.matmul(x, p[name + ".weight"])
    return ad.add_bias(y, p[name + ".bias"]) if spec.has_bias else y
