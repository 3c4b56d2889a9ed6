"""Runtime property suite behind ``haformer check``.

Each check returns ``(ok, detail)``. Gradient fixtures live here too, keyed
by the names :func:`haformer.autodiff.grad_check` accepts.
"""

from __future__ import annotations

import math
import time
from dataclasses import replace

import numpy as np

from . import autodiff as ad
from . import tensor_core as tc
from .efficient_transformer import EtConfig, TokenGrid, attention_maps, emhsa, et_block, et_ledger
from .fusion import cwf, fusion_ledger
from .hape import hape_forward, hape_ledger, pem_attention
from .layers import init_params
from .tensor_core import ConvSpec

KINK_OFFSET = 0.05
FD_EPS = 1e-3


def _randomize(store, rng, scale=0.3):
    """Non-degenerate values for every tensor (incl. zero-initialised ones)."""
    return {k: (v + scale * rng.standard_normal(v.shape)).astype(tc.DTYPE) for k, v in store.items()}


def _probe_weights(shape, seed):
    return np.random.default_rng(seed + 1000).standard_normal(shape)


# ---------------------------------------------------------------------------
# gradient fixtures: seed -> (loss_fn, store, inputs)


def _unary(op, shape, positive=False):
    def make(seed):
        rng = np.random.default_rng(seed)
        x = rng.uniform(-2, 2, shape) + KINK_OFFSET
        if positive:
            x = np.abs(x) + 0.1
        out_shape = op(ad.Node(x)).shape
        w = _probe_weights(out_shape, seed)
        return (lambda p, i: ad.weighted_sum(op(i["x"]), w)), {}, {"x": x.astype(tc.DTYPE)}

    return make


def _binary(op, sa, sb):
    def make(seed):
        rng = np.random.default_rng(seed)
        a = rng.uniform(-2, 2, sa).astype(tc.DTYPE)
        b = rng.uniform(-2, 2, sb).astype(tc.DTYPE)
        w = _probe_weights(op(ad.Node(a), ad.Node(b)).shape, seed)
        return (lambda p, i: ad.weighted_sum(op(i["a"], i["b"]), w)), {}, {"a": a, "b": b}

    return make


def _conv_fixture(spec, hw):
    def make(seed):
        rng = np.random.default_rng(seed)
        store = _randomize(init_params({"c": spec}, rng), rng)
        x = rng.standard_normal((spec.in_channels,) + hw).astype(tc.DTYPE)
        out = tc.conv2d(x, store["c.weight"], store.get("c.bias"), spec)
        w = _probe_weights(out.shape, seed)

        def loss(p, i):
            b = p["c.bias"] if spec.has_bias else None
            return ad.weighted_sum(ad.conv2d(i["x"], p["c.weight"], b, spec), w)

        return loss, store, {"x": x}

    return make


def _prelu_fixture(seed):
    rng = np.random.default_rng(seed)
    x = (rng.uniform(-2, 2, (3, 4, 4)) + KINK_OFFSET).astype(tc.DTYPE)
    store = {"slope": rng.uniform(0.1, 0.4, 3).astype(tc.DTYPE)}
    w = _probe_weights(x.shape, seed)
    return (lambda p, i: ad.weighted_sum(ad.prelu(i["x"], p["slope"]), w)), store, {"x": x}


def _layer_norm_fixture(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((5, 6)).astype(tc.DTYPE)
    store = {"g": rng.uniform(0.5, 1.5, 6).astype(tc.DTYPE), "b": rng.standard_normal(6).astype(tc.DTYPE)}
    w = _probe_weights(x.shape, seed)
    return (lambda p, i: ad.weighted_sum(ad.layer_norm(i["x"], p["g"], p["b"]), w)), store, {"x": x}


def _cross_entropy_fixture(seed):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((3, 4, 5)).astype(tc.DTYPE)
    labels = rng.integers(0, 3, (4, 5))
    labels[0, 0] = ad.IGNORE_INDEX
    return (lambda p, i: ad.cross_entropy(i["z"], labels)), {}, {"z": z}


def _concat_fixture(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((2, 3, 3)).astype(tc.DTYPE)
    b = rng.standard_normal((3, 3, 3)).astype(tc.DTYPE)
    w = _probe_weights((5, 3, 3), seed)
    return (lambda p, i: ad.weighted_sum(ad.concat([i["a"], i["b"]], 0), w)), {}, {"a": a, "b": b}


def hape_fixture(kind="hape", channels=8, hw=(6, 6), dilation=2):
    def make(seed):
        rng = np.random.default_rng(seed)
        led = hape_ledger(channels, dilation, kind)
        store = _randomize(init_params(led, rng), rng, 0.2)
        x = (rng.standard_normal((channels,) + hw) + KINK_OFFSET).astype(tc.DTYPE)
        w = _probe_weights((channels,) + hw, seed)
        return (lambda p, i: ad.weighted_sum(hape_forward(i["x"], p, dilation, kind), w)), store, {"x": x}

    return make


SMALL_ET = EtConfig(patch=1, dim=8, attn_dim=8, heads=2, splits=2, reduction=1, mlp_ratio=2, blocks=1)


def et_fixture(cfg=SMALL_ET, grid=(3, 3), block=True):
    def make(seed):
        rng = np.random.default_rng(seed)
        store = _randomize(init_params(et_ledger(cfg), rng), rng, 0.2)
        n = grid[0] * grid[1]
        z = rng.standard_normal((n, cfg.dim)).astype(tc.DTYPE)
        w = _probe_weights((n, cfg.dim), seed)
        if block:
            return (lambda p, i: ad.weighted_sum(et_block(TokenGrid(i["z"], grid), p, cfg).tokens, w)), store, {"z": z}
        return (lambda p, i: ad.weighted_sum(emhsa(i["z"], p, cfg), w)), store, {"z": z}

    return make


def cwf_fixture(channels=4, hw=(4, 4)):
    def make(seed):
        rng = np.random.default_rng(seed)
        store = _randomize(init_params(fusion_ledger(channels, "cwf"), rng), rng, 0.2)
        t = (rng.standard_normal((channels,) + hw) + KINK_OFFSET).astype(tc.DTYPE)
        f = (rng.standard_normal((channels,) + hw) + KINK_OFFSET).astype(tc.DTYPE)
        w = _probe_weights((channels,) + hw, seed)
        return (lambda p, i: ad.weighted_sum(cwf(i["t"], i["f"], p), w)), store, {"t": t, "f": f}

    return make


def kink_margin(loss_fn, store, inputs):
    """Smallest |pre-activation| feeding a ReLU/PReLU in one forward pass."""
    with ad.Tape() as tape:
        leaves = {k: ad.leaf(v, "input:" + k) for k, v in inputs.items()}
        loss_fn(ad.Params(store), leaves)
    vals = [float(np.abs(n.parents[0].value).min()) for n in tape.nodes if n.op in ("relu", "prelu")]
    return min(vals, default=math.inf)


def screened(make, margin=5 * FD_EPS, tries=400):
    """Redraw a fixture until no activation input sits within ``margin`` of
    its kink, where a central difference would straddle the corner."""

    def wrapped(seed):
        for k in range(tries):
            fx = make(seed + 10007 * k)
            if kink_margin(*fx) >= margin:
                return fx
        raise RuntimeError(f"no kink-free draw within {tries} tries")

    return wrapped


GRAD_FIXTURES = {
    "conv2d": _conv_fixture(ConvSpec.same(2, 3, (3, 3)), (4, 4)),
    "conv2d_strided": _conv_fixture(ConvSpec.same(3, 4, (3, 3), stride=(2, 2)), (5, 6)),
    "conv2d_dilated_depthwise": _conv_fixture(ConvSpec.same(3, 3, (5, 1), dilation=(2, 1), groups=3), (6, 5)),
    "conv2d_grouped": _conv_fixture(ConvSpec.same(4, 6, (1, 3), groups=2, has_bias=False), (3, 5)),
    "matmul": _binary(ad.matmul, (4, 3), (3, 5)),
    "softmax": _unary(lambda x: ad.softmax(x, axis=1), (3, 6)),
    "relu": _unary(ad.relu, (3, 4)),
    "prelu": _prelu_fixture,
    "sigmoid": _unary(ad.sigmoid, (3, 4)),
    "gelu": _unary(ad.gelu, (3, 4)),
    "add_broadcast": _binary(ad.add, (3, 4, 4), (1, 4, 4)),
    "mul_broadcast": _binary(ad.mul, (3, 4, 4), (3, 1, 1)),
    "scale": _unary(lambda x: ad.scale(x, 0.7), (2, 3)),
    "gap": _unary(ad.global_avg_pool_spatial, (3, 4, 5)),
    "channel_mean": _unary(ad.channel_mean_map, (3, 4, 5)),
    "shuffle": _unary(lambda x: ad.channel_shuffle(x, 2), (6, 2, 2)),
    "upsample": _unary(lambda x: ad.bilinear_upsample(x, (6, 8)), (2, 3, 4)),
    "reshape": _unary(lambda x: ad.reshape(x, (4, 3)), (2, 6)),
    "transpose": _unary(ad.transpose2d, (3, 5)),
    "permute": _unary(lambda x: ad.permute(x, (2, 0, 1)), (2, 3, 4)),
    "columns": _unary(lambda x: ad.columns(x, 1, 3), (4, 5)),
    "concat": _concat_fixture,
    "layer_norm": _layer_norm_fixture,
    "cross_entropy": _cross_entropy_fixture,
    "hape": hape_fixture("hape"),
    "hm": hape_fixture("hm"),
    "rm": hape_fixture("rm"),
    "emhsa": et_fixture(block=False),
    "emhsa_reduced": et_fixture(replace(SMALL_ET, reduction=3), block=False),
    "et_block": et_fixture(),
    "cwf": cwf_fixture(),
}

GRAD_FIXTURES = {k: screened(v) for k, v in GRAD_FIXTURES.items()}

PRIMITIVES = [k for k in GRAD_FIXTURES if k not in ("hape", "hm", "rm", "emhsa", "emhsa_reduced", "et_block", "cwf")]


# ---------------------------------------------------------------------------
# independent oracles


def vanilla_attention(z, wq, wk, wv, wo):
    """Textbook scaled dot-product attention in float64."""
    z, wq, wk, wv, wo = (np.asarray(a, dtype=np.float64) for a in (z, wq, wk, wv, wo))
    q, k, v = z @ wq, z @ wk, z @ wv
    s = q @ k.T / math.sqrt(q.shape[1])
    s = np.exp(s - s.max(axis=1, keepdims=True))
    s /= s.sum(axis=1, keepdims=True)
    return s @ v @ wo


# ---------------------------------------------------------------------------
# property checks


class Suite:
    def __init__(self, inject_fault=False):
        self.inject_fault = inject_fault
        self.checks = []

    def check(self, name):
        def deco(fn):
            self.checks.append((name, fn))
            return fn

        return deco


def build_suite(inject_fault=False) -> Suite:
    suite = Suite(inject_fault)
    check = suite.check
    fault = inject_fault

    for prim in PRIMITIVES:
        @check(f"autodiff.grad.{prim}")
        def _g(prim=prim):
            rep = ad.grad_check(prim, 1e-3)
            return rep["pass"], f"max_rel_err={rep['max_rel_err']:.2e}"

    for blk in ("hape", "hm", "rm", "emhsa", "emhsa_reduced", "et_block", "cwf"):
        @check(f"{blk}.grad_check")
        def _b(blk=blk):
            rep = ad.grad_check(blk, 1e-3)
            return rep["pass"], f"max_rel_err={rep['max_rel_err']:.2e}"

    @check("tensor_core.softmax_normalization")
    def _():
        rng = np.random.default_rng(1)
        worst = 0.0
        for _ in range(100):
            x = rng.uniform(-50, 50, (4, 7)).astype(tc.DTYPE)
            y = tc.softmax(x, axis=1)
            if (y < 0).any():
                return False, "negative probability"
            worst = max(worst, float(np.abs(y.sum(1) - 1).max()))
        return worst <= 1e-6, f"max |sum-1|={worst:.1e}"

    @check("tensor_core.shuffle_permutation")
    def _():
        rng = np.random.default_rng(2)
        x = rng.standard_normal((12, 3, 3)).astype(tc.DTYPE)
        y = tc.channel_shuffle(x, 3)
        back = tc.channel_shuffle(y, 4)
        same = np.array_equal(np.sort(x, axis=None), np.sort(y, axis=None))
        return bool(same and np.array_equal(back, x)), "round trip + multiset"

    @check("tensor_core.conv_linearity")
    def _():
        rng = np.random.default_rng(3)
        spec = ConvSpec.same(3, 4, (3, 3), dilation=(2, 2), has_bias=False)
        w = rng.standard_normal(spec.weight_shape).astype(tc.DTYPE)
        x1, x2 = rng.standard_normal((2, 3, 7, 7)).astype(tc.DTYPE)
        lhs = tc.conv2d(2.0 * x1 - 0.5 * x2, w, None, spec)
        rhs = 2.0 * tc.conv2d(x1, w, None, spec) - 0.5 * tc.conv2d(x2, w, None, spec)
        err = float(np.abs(lhs - rhs).max())
        return err <= 1e-5 * max(1.0, float(np.abs(rhs).max())), f"max err={err:.1e}"

    @check("tensor_core.upsample_constant")
    def _():
        x = np.full((2, 3, 5), 1.7, tc.DTYPE)
        y = tc.bilinear_upsample(x, (9, 13))
        err = float(np.abs(y - 1.7).max())
        return err <= 1e-6, f"max err={err:.1e}"

    @check("pem.attention_normalization")
    def _():
        rng = np.random.default_rng(4)
        worst = 0.0
        for _ in range(100):
            x = rng.uniform(-10, 10, (4, 5, 6)).astype(tc.DTYPE)
            a = pem_attention(x).value
            if (a < 0).any():
                return False, "negative attention"
            worst = max(worst, abs(float(a.sum(dtype=np.float64)) - 1))
        return worst <= 1e-6, f"max |sum-1|={worst:.1e}"

    @check("hape.zero_branch_residual")
    def _():
        rng = np.random.default_rng(5)
        led = hape_ledger(8, 2, "hape")
        store = init_params(led, rng)
        for k in store:
            if not k.startswith("reduce") and (k.endswith(".weight") or k.endswith(".bias")):
                store[k] = np.zeros_like(store[k])
        if fault:
            store["expand.weight"][0, 0, 0, 0] = 0.5
        x = rng.standard_normal((8, 5, 5)).astype(tc.DTYPE)
        y = hape_forward(x, ad.Params(store), 2).value
        err = float(np.abs(y - tc.channel_shuffle(x, 4)).max())
        return err <= 1e-6, f"max err={err:.1e}"

    @check("hape.shape_preserved")
    def _():
        rng = np.random.default_rng(6)
        x = rng.standard_normal((8, 9, 11)).astype(tc.DTYPE)
        for d in (1, 2, 4, 8, 16):
            store = init_params(hape_ledger(8, d), rng)
            if hape_forward(x, ad.Params(store), d).shape != x.shape:
                return False, f"d={d}"
        return True, "all dilations"

    @check("emhsa.vanilla_equivalence")
    def _():
        rng = np.random.default_rng(7)
        worst = 0.0
        for _ in range(20):
            n = int(rng.integers(1, 33))
            d = int(rng.integers(1, 9)) * 2
            cfg = EtConfig(dim=d, attn_dim=d, heads=1, splits=1, reduction=1)
            store = init_params(et_ledger(cfg), rng)
            z = rng.standard_normal((n, d)).astype(tc.DTYPE)
            out = emhsa(z, ad.Params(store), cfg).value
            wo = store["o.weight"] * (1.5 if fault else 1.0)
            ref = vanilla_attention(z, store["q.weight"], store["k.weight"], store["v.weight"], wo)
            worst = max(worst, float(np.abs(out - ref).max()))
        return worst <= 1e-5, f"max err={worst:.1e}"

    @check("emhsa.row_stochastic")
    def _():
        rng = np.random.default_rng(8)
        cfg = EtConfig(dim=16, attn_dim=16, heads=2, splits=4, reduction=2)
        worst = 0.0
        for _ in range(100):
            store = init_params(et_ledger(cfg), rng)
            z = rng.standard_normal((12, 16)).astype(tc.DTYPE)
            for a in attention_maps(z, ad.Params(store), cfg):
                if a.shape != (12, 6) or (a < 0).any():
                    return False, f"bad map shape {a.shape}"
                worst = max(worst, float(np.abs(a.sum(1, dtype=np.float64) - 1).max()))
        return worst <= 1e-6, f"max |row sum-1|={worst:.1e}"

    @check("emhsa.permutation_equivariance")
    def _():
        rng = np.random.default_rng(9)
        cfg = EtConfig(dim=8, attn_dim=8, heads=2, splits=2, reduction=1)
        store = init_params(et_ledger(cfg), rng)
        z = rng.standard_normal((10, 8)).astype(tc.DTYPE)
        perm = rng.permutation(10)
        a = emhsa(z, ad.Params(store), cfg).value
        b = emhsa(z[perm], ad.Params(store), cfg).value
        err = float(np.abs(a[perm] - b).max())
        return err <= 1e-5, f"max err={err:.1e}"

    @check("emhsa.score_storage")
    def _():
        cfg = EtConfig(dim=16, attn_dim=16, heads=2, splits=4, reduction=2)
        store = init_params(et_ledger(cfg), np.random.default_rng(10))
        with tc.probe() as pr:
            emhsa(np.ones((64, 16), tc.DTYPE), ad.Params(store), cfg)
        return pr.peak_scores == 64 * 32, f"peak={pr.peak_scores}"

    @check("et_block.zero_projection_identity")
    def _():
        rng = np.random.default_rng(11)
        cfg = EtConfig(dim=8, attn_dim=8, heads=2, splits=2, reduction=3)
        store = _randomize(init_params(et_ledger(cfg), rng), rng)
        for k in ("o.weight", "fc2.weight", "fc2.bias"):
            store[k] = np.zeros_like(store[k])
        if fault:
            store["fc2.bias"][0] = 0.1
        z = rng.standard_normal((9, 8)).astype(tc.DTYPE)
        y = et_block(TokenGrid(z, (3, 3)), ad.Params(store), cfg).tokens.value
        err = float(np.abs(y - z).max())
        return err <= 1e-6, f"max err={err:.1e}"

    @check("cwf.zero_conv_closed_form")
    def _():
        rng = np.random.default_rng(12)
        store = {k: np.zeros_like(v) for k, v in init_params(fusion_ledger(4), rng).items()}
        t, f = rng.standard_normal((2, 4, 4, 4)).astype(tc.DTYPE)
        z = cwf(t, f, ad.Params(store)).value
        err = float(np.abs(z - np.maximum(0.5 * (t + f), 0)).max())
        return err <= 1e-6, f"max err={err:.1e}"

    @check("cwf.gate_saturation")
    def _():
        rng = np.random.default_rng(13)
        store = _randomize(init_params(fusion_ledger(4), rng), rng)
        t, f = rng.standard_normal((2, 4, 4, 4)).astype(tc.DTYPE)
        store["post.bias"] = np.full(4, 20.0, tc.DTYPE)
        up = cwf(t, f, ad.Params(store)).value
        store["post.bias"] = np.full(4, -20.0, tc.DTYPE)
        down = cwf(t, f, ad.Params(store)).value
        e1 = float(np.abs(up - np.maximum(t + f, 0)).max())
        e2 = float(np.abs(down).max())
        return max(e1, e2) <= 1e-4, f"errs={e1:.1e},{e2:.1e}"

    @check("network.dilation_schedule")
    def _():
        from .network import DILATION_SCHEDULE, ModelConfig, build

        m = build(replace(ModelConfig(), height=64, width=64))
        return m.dilations() == DILATION_SCHEDULE, str(m.dilations())

    @check("network.shape_ledger")
    def _():
        from .network import ModelConfig, build

        m = build(replace(ModelConfig(), height=64, width=64))
        logits, taps = m.forward_with_taps(np.zeros((3, 64, 64), tc.DTYPE))
        shapes = (taps["F"].shape, taps["T"].shape, logits.shape)
        return shapes == ((128, 8, 8), (16, 128), (19, 64, 64)), str(shapes)

    @check("accounting.param_enumeration")
    def _():
        from .accounting import cost_report, enumerate_params
        from .network import VARIANTS, build, variant

        bad = [v for v in VARIANTS if cost_report(build(variant(v))).params != enumerate_params(build(variant(v)))]
        return not bad, f"mismatched: {bad}" if bad else "all variants"

    @check("accounting.ablation_ordering")
    def _():
        from .accounting import cost_report
        from .network import variant

        p = {v: cost_report(variant(v)).params for v in
             ("rm-baseline", "hm-baseline", "hape-baseline", "default", "add-fusion", "concat-fusion")}
        ok = p["rm-baseline"] < p["hm-baseline"] < p["hape-baseline"] < p["default"]
        ok = ok and p["add-fusion"] < p["default"] < p["concat-fusion"]
        return ok, str(p)

    return suite


def run_checks(pattern="", inject_fault=False, out=print):
    """Run every check whose name contains ``pattern``; returns (passed, failed)."""
    suite = build_suite(inject_fault)
    passed = failed = 0
    for name, fn in suite.checks:
        if pattern and pattern not in name:
            continue
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # noqa: BLE001 - a crash is a failure result
            ok, detail = False, f"error: {exc!r}"
        dt = time.perf_counter() - t0
        out(f"{'PASS' if ok else 'FAIL'}  {name}  ({detail})  # time: {dt:.2f}s")
        passed += ok
        failed += not ok
    return passed, failed
