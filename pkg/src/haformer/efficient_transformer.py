"""Patch embedding, reduced-cost multi-head attention, convolutional MLP and
the transformer block that stacks them."""

from __future__ import annotations

import math
from dataclasses import dataclass

from . import autodiff as ad
from .layers import LinearSpec, VectorSpec, linear
from .tensor_core import ConvSpec, ShapeError, active_probe

LN_EPS = 1e-5


@dataclass(frozen=True)
class EtConfig:
    patch: int = 1
    dim: int = 128
    attn_dim: int = 64
    heads: int = 4
    splits: int = 4
    reduction: int = 2
    mlp_ratio: int = 2
    blocks: int = 2

    def __post_init__(self):
        if min(self.patch, self.dim, self.attn_dim, self.heads, self.splits, self.reduction, self.mlp_ratio) < 1:
            raise ValueError(f"transformer hyperparameters must be positive: {self}")
        if self.blocks < 0:
            raise ValueError("blocks must be >= 0")
        if self.attn_dim % self.heads:
            raise ValueError(f"attn_dim={self.attn_dim} not divisible by heads={self.heads}")
        if self.head_dim % self.splits:
            raise ValueError(f"head dim {self.head_dim} not divisible by splits={self.splits}")

    @property
    def head_dim(self):
        return self.attn_dim // self.heads

    @property
    def hidden(self):
        return self.dim * self.mlp_ratio

    def check_tokens(self, n):
        if n % self.reduction:
            raise ShapeError(f"token count {n} not divisible by reduction ratio r={self.reduction}")


@dataclass
class TokenGrid:
    tokens: ad.Node  # [N, D]
    grid: tuple[int, int]

    def __post_init__(self):
        self.tokens = ad.const(self.tokens)
        n = self.tokens.shape[0]
        if n != self.grid[0] * self.grid[1]:
            raise ShapeError(f"{n} tokens do not fill a {self.grid[0]}x{self.grid[1]} grid")


def et_ledger(cfg: EtConfig):
    d = cfg.head_dim
    led = {
        "norm1.gamma": VectorSpec(cfg.dim, 1.0),
        "norm1.beta": VectorSpec(cfg.dim, 0.0),
        "q": LinearSpec(cfg.dim, cfg.attn_dim),
        "k": LinearSpec(cfg.dim, cfg.attn_dim),
        "v": LinearSpec(cfg.dim, cfg.attn_dim),
    }
    if cfg.reduction > 1:
        for j in range(cfg.heads):
            led[f"sr{j}"] = LinearSpec(d * cfg.reduction, d)
    led["o"] = LinearSpec(cfg.attn_dim, cfg.dim)
    led["norm2.gamma"] = VectorSpec(cfg.dim, 1.0)
    led["norm2.beta"] = VectorSpec(cfg.dim, 0.0)
    led["fc1"] = LinearSpec(cfg.dim, cfg.hidden, has_bias=True)
    led["dw"] = ConvSpec.same(cfg.hidden, cfg.hidden, (3, 3), groups=cfg.hidden)
    led["fc2"] = LinearSpec(cfg.hidden, cfg.dim, has_bias=True)
    return led


def patchify(x, patch):
    """``[C, H, W] -> [N, C*P*P]``, patches in row-major grid order, each
    flattened in (channel, row, col) order."""
    x = ad.const(x)
    c, h, w = x.shape
    if h % patch or w % patch:
        raise ShapeError(f"patch size {patch} does not divide feature extents ({h}, {w})")
    gh, gw = h // patch, w // patch
    t = ad.reshape(x, (c, gh, patch, gw, patch))
    t = ad.permute(t, (1, 3, 0, 2, 4))
    return ad.reshape(t, (gh * gw, c * patch * patch)), (gh, gw)


def unpatchify(tokens, grid, channels, patch):
    """Inverse of :func:`patchify`."""
    tokens = ad.const(tokens)
    gh, gw = grid
    n, dim = tokens.shape
    if n != gh * gw or dim != channels * patch * patch:
        raise ShapeError(
            f"tokens {tokens.shape} do not match grid {grid} with {channels} channels and patch {patch}"
        )
    t = ad.reshape(tokens, (gh, gw, channels, patch, patch))
    t = ad.permute(t, (2, 0, 3, 1, 4))
    return ad.reshape(t, (channels, gh * patch, gw * patch))


def patch_embed(x, patch, embedding) -> TokenGrid:
    flat, grid = patchify(x, patch)
    return TokenGrid(ad.matmul(flat, embedding), grid)


def spatial_reduce(t, r, proj):
    """Merge ``r`` consecutive tokens ``[N, d] -> [N/r, d*r]`` and project
    back to width ``d``."""
    t = ad.const(t)
    n, d = t.shape
    if n % r:
        raise ShapeError(f"token count {n} not divisible by reduction ratio r={r}")
    return ad.matmul(ad.reshape(t, (n // r, d * r)), proj)


def emhsa(z, p: ad.Params, cfg: EtConfig):
    z = z.tokens if isinstance(z, TokenGrid) else ad.const(z)
    n = z.shape[0]
    cfg.check_tokens(n)
    inv_sqrt_d = 1.0 / math.sqrt(cfg.head_dim)
    q_all = ad.matmul(z, p["q.weight"])
    k_all = ad.matmul(z, p["k.weight"])
    v_all = ad.matmul(z, p["v.weight"])
    d = cfg.head_dim
    w = d // cfg.splits
    probe = active_probe()
    heads = []
    for j in range(cfg.heads):
        q = ad.columns(q_all, j * d, (j + 1) * d)
        k = ad.columns(k_all, j * d, (j + 1) * d)
        v = ad.columns(v_all, j * d, (j + 1) * d)
        if cfg.reduction > 1:
            proj = p[f"sr{j}.weight"]
            k = spatial_reduce(k, cfg.reduction, proj)
            v = spatial_reduce(v, cfg.reduction, proj)
        chunks = []
        for i in range(cfg.splits):
            qi = ad.columns(q, i * w, (i + 1) * w)
            ki = ad.columns(k, i * w, (i + 1) * w)
            vi = ad.columns(v, i * w, (i + 1) * w)
            # scaled by the full head width, not the chunk width
            scores = ad.scale(ad.matmul(qi, ad.transpose2d(ki)), inv_sqrt_d)
            if probe is not None:
                probe.note_scores(scores.value.size)
            chunks.append(ad.matmul(ad.softmax(scores, axis=1), vi))
        heads.append(chunks[0] if len(chunks) == 1 else ad.concat(chunks, axis=1))
    cat = heads[0] if len(heads) == 1 else ad.concat(heads, axis=1)
    return ad.matmul(cat, p["o.weight"])


def attention_maps(z, p: ad.Params, cfg: EtConfig):
    """Row-stochastic attention matrices of every (head, chunk), for inspection."""
    z = z.tokens if isinstance(z, TokenGrid) else ad.const(z)
    d = cfg.head_dim
    w = d // cfg.splits
    maps = []
    q_all = ad.matmul(z, p["q.weight"]).value
    k_all = ad.matmul(z, p["k.weight"])
    for j in range(cfg.heads):
        k = ad.columns(k_all, j * d, (j + 1) * d)
        if cfg.reduction > 1:
            k = spatial_reduce(k, cfg.reduction, p[f"sr{j}.weight"])
        for i in range(cfg.splits):
            qi = q_all[:, j * d + i * w: j * d + (i + 1) * w]
            ki = k.value[:, i * w:(i + 1) * w]
            maps.append(ad.softmax(qi @ ki.T / math.sqrt(d), axis=1).value)
    return maps


def emlp(z: TokenGrid, p: ad.Params, cfg: EtConfig):
    led = et_ledger(cfg)
    gh, gw = z.grid
    hidden = linear(p, "fc1", z.tokens, led["fc1"])
    grid = ad.reshape(ad.transpose2d(hidden), (cfg.hidden, gh, gw))
    grid = ad.conv2d(grid, p["dw.weight"], p["dw.bias"], led["dw"])
    grid = ad.gelu(grid)
    hidden = ad.transpose2d(ad.reshape(grid, (cfg.hidden, gh * gw)))
    return linear(p, "fc2", hidden, led["fc2"])


def et_block(z: TokenGrid, p: ad.Params, cfg: EtConfig) -> TokenGrid:
    """Pre-norm block: ``z + eMHSA(LN(z))`` then ``+ eMLP(LN(.))``."""
    if z.tokens.shape[1] != cfg.dim:
        raise ShapeError(f"token width {z.tokens.shape[1]} != configured dim {cfg.dim}")
    t = z.tokens
    h = ad.layer_norm(t, p["norm1.gamma"], p["norm1.beta"], LN_EPS)
    t = ad.add(t, emhsa(h, p, cfg))
    h = ad.layer_norm(t, p["norm2.gamma"], p["norm2.beta"], LN_EPS)
    t = ad.add(t, emlp(TokenGrid(h, z.grid), p, cfg))
    return TokenGrid(t, z.grid)
