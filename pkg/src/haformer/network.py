"""Full two-branch segmentation network: stems, four CNN stages of HAPE
blocks, efficient transformer branch, fusion and decoder head."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from .efficient_transformer import LN_EPS, EtConfig, TokenGrid, et_block, et_ledger, patch_embed
from .fusion import FUSION_KINDS, fuse, fusion_ledger, reshape_tokens_to_map
from .hape import KINDS as BLOCK_KINDS
from .hape import PRELU_INIT, hape_forward, hape_ledger
from .layers import LinearSpec, VectorSpec, conv, init_params, tensor_shapes
from .tensor_core import DTYPE, ConvSpec, ShapeError

DILATION_SCHEDULE = ((2, 2, 2), (4, 4, 8, 8, 16, 16), (4, 4, 8, 8, 16, 16), (2, 2, 2))
STAGE_DEPTHS = (3, 6, 6, 3)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 19
    height: int = 512
    width: int = 1024
    stem_channels: int = 16
    stage_channels: tuple = (32, 64, 128, 128)
    stage_depths: tuple = STAGE_DEPTHS
    dilation_schedule: tuple = DILATION_SCHEDULE
    tstem_channels: tuple = (16, 32, 64, 128)
    patch: int = 1
    attn_dim: int = 64
    heads: int = 4
    splits: int = 4
    reduction: int = 2
    mlp_ratio: int = 2
    et_blocks: int = 2
    fusion: str = "cwf"
    block: str = "hape"
    decoder_init: str = "kaiming"
    residual_init: str = "zero"

    def __post_init__(self):
        # normalise list-valued fields so configs compare and hash reliably
        object.__setattr__(self, "stage_channels", tuple(self.stage_channels))
        object.__setattr__(self, "stage_depths", tuple(self.stage_depths))
        object.__setattr__(self, "tstem_channels", tuple(self.tstem_channels))
        object.__setattr__(self, "dilation_schedule", tuple(tuple(s) for s in self.dilation_schedule))

    @property
    def transformer(self) -> bool:
        return self.et_blocks > 0

    @property
    def fused_channels(self):
        return self.stage_channels[-1]

    @property
    def token_channels(self):
        return self.tstem_channels[-1]

    @property
    def et(self) -> EtConfig:
        return EtConfig(
            patch=self.patch,
            dim=self.token_channels * self.patch ** 2,
            attn_dim=self.attn_dim,
            heads=self.heads,
            splits=self.splits,
            reduction=self.reduction,
            mlp_ratio=self.mlp_ratio,
            blocks=self.et_blocks,
        )

    def token_grid(self, height=None, width=None):
        h = (height or self.height) // (16 * self.patch)
        w = (width or self.width) // (16 * self.patch)
        return h, w

    def validate(self):
        if self.stage_depths != STAGE_DEPTHS:
            raise ConfigError(f"stage_depths must be {STAGE_DEPTHS}, got {self.stage_depths}")
        if len(self.stage_channels) != 4:
            raise ConfigError("stage_channels needs four entries")
        if self.stage_channels[2] != self.stage_channels[3]:
            raise ConfigError("stages 3 and 4 must share a width (the fused feature width)")
        if len(self.dilation_schedule) != 4 or any(
            len(s) != d for s, d in zip(self.dilation_schedule, self.stage_depths)
        ):
            raise ConfigError("dilation_schedule lengths must match stage_depths")
        if any(r < 1 for s in self.dilation_schedule for r in s):
            raise ConfigError("dilation rates must be >= 1")
        if self.block not in BLOCK_KINDS:
            raise ConfigError(f"block must be one of {BLOCK_KINDS}, got {self.block!r}")
        if any(c % 4 for c in self.stage_channels):
            raise ConfigError("stage channels must be divisible by 4")
        if self.num_classes < 1 or self.num_classes > 255:
            raise ConfigError("num_classes must lie in [1, 255]")
        if self.decoder_init not in ("kaiming", "zero"):
            raise ConfigError(f"decoder_init must be 'kaiming' or 'zero', got {self.decoder_init!r}")
        if self.residual_init not in ("kaiming", "zero"):
            raise ConfigError(f"residual_init must be 'kaiming' or 'zero', got {self.residual_init!r}")
        if self.height % 16 or self.width % 16:
            raise ConfigError(f"input ({self.height}x{self.width}) must be divisible by 16")
        if self.transformer:
            if self.fusion not in FUSION_KINDS:
                raise ConfigError(f"fusion must be one of {FUSION_KINDS} when et_blocks > 0, got {self.fusion!r}")
            if len(self.tstem_channels) != 4:
                raise ConfigError("tstem_channels needs four entries (four stride-2 convs)")
            if self.token_channels != self.fused_channels:
                raise ConfigError(
                    f"token channels C_t={self.token_channels} must equal fused width C_f={self.fused_channels}"
                )
            if self.height % (16 * self.patch) or self.width % (16 * self.patch):
                raise ConfigError(f"input must be divisible by 16*patch={16 * self.patch}")
            try:
                et = self.et
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
            gh, gw = self.token_grid()
            if (gh * gw) % et.reduction:
                raise ConfigError(f"token count {gh * gw} not divisible by reduction ratio {et.reduction}")
        elif self.fusion != "none":
            raise ConfigError("et_blocks = 0 requires fusion = none")
        return self


VARIANTS = {
    "default": {},
    "rm-baseline": {"block": "rm", "et_blocks": 0, "fusion": "none"},
    "hm-baseline": {"block": "hm", "et_blocks": 0, "fusion": "none"},
    "hape-baseline": {"block": "hape", "et_blocks": 0, "fusion": "none"},
    "add-fusion": {"fusion": "add"},
    "concat-fusion": {"fusion": "concat"},
    "L1": {"et_blocks": 1},
    "tt-attention": {"splits": 1, "reduction": 1},
}


def variant(name, base: ModelConfig | None = None) -> ModelConfig:
    if name not in VARIANTS:
        raise ConfigError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
    return replace(base or ModelConfig(), **VARIANTS[name])


# ---------------------------------------------------------------------------
# config files: flat ``key = value`` with ``#`` comments


def _parse_value(name, raw, default):
    raw = raw.strip()
    try:
        if name == "dilation_schedule":
            return tuple(tuple(int(v) for v in part.split(",")) for part in raw.split(";"))
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(","))
        if isinstance(default, int):
            return int(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def parse_config(text) -> ModelConfig:
    defaults = ModelConfig()
    known = {f.name: getattr(defaults, f.name) for f in fields(ModelConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key == "variant":
            if raw not in VARIANTS:
                raise ConfigError(f"line {lineno}: unknown variant {raw!r}")
            values = {**VARIANTS[raw], **values}
            continue
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, raw, known[key])
    return ModelConfig(**values).validate()


def load_config(path) -> ModelConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def format_config(cfg: ModelConfig) -> str:
    lines = []
    for f in fields(ModelConfig):
        v = getattr(cfg, f.name)
        if f.name == "dilation_schedule":
            v = ";".join(",".join(map(str, s)) for s in v)
        elif isinstance(v, tuple):
            v = ",".join(map(str, v))
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# architecture ledger


def _act(c):
    return VectorSpec(c, PRELU_INIT)


def model_ledger(cfg: ModelConfig):
    """Ordered ``[(module, kind, ledger, extra)]`` describing every module.

    ``extra`` carries the structural facts the forward pass needs (dilation,
    resolution divisor).
    """
    cfg.validate()
    mods = []
    c1 = cfg.stem_channels
    stem = {}
    for i, (cin, stride) in enumerate(((3, 1), (c1, 1), (c1, 2))):
        stem[f"conv{i}"] = ConvSpec.same(cin, c1, (3, 3), stride=(stride, stride))
        stem[f"act{i}"] = _act(c1)
    mods.append(("cnn_stem", "stem", stem, {}))
    prev = c1
    for s, (ch, depth, rates) in enumerate(zip(cfg.stage_channels, cfg.stage_depths, cfg.dilation_schedule), 1):
        if s in (1, 2):
            mods.append((f"down{s}", "down", {"conv": ConvSpec.same(prev, ch, (3, 3), stride=(2, 2)), "act": _act(ch)}, {}))
        elif s == 3:
            mods.append(("transition", "down", {"conv": ConvSpec.same(prev, ch, (3, 3)), "act": _act(ch)}, {}))
        for b, rate in enumerate(rates):
            mods.append((f"stage{s}.{b}", cfg.block, hape_ledger(ch, rate, cfg.block), {"dilation": rate}))
        prev = ch
    mods.append(("cnn_norm", "norm", {"gamma": VectorSpec(prev, 1.0), "beta": VectorSpec(prev, 0.0)}, {}))
    if cfg.transformer:
        tstem = {}
        cin = 3
        for i, ch in enumerate(cfg.tstem_channels):
            tstem[f"conv{i}"] = ConvSpec.same(cin, ch, (3, 3), stride=(2, 2))
            tstem[f"act{i}"] = _act(ch)
            cin = ch
        mods.append(("tstem", "stem", tstem, {}))
        et = cfg.et
        mods.append(("embed", "embed", {"proj": LinearSpec(cfg.token_channels * cfg.patch ** 2, et.dim)}, {}))
        for i in range(cfg.et_blocks):
            mods.append((f"et.{i}", "et", et_ledger(et), {}))
        mods.append(("et_norm", "norm", {"gamma": VectorSpec(et.dim, 1.0), "beta": VectorSpec(et.dim, 0.0)}, {}))
        mods.append(("fusion", cfg.fusion, fusion_ledger(cfg.fused_channels, cfg.fusion), {}))
    mods.append(("decoder", "decoder", {"cls": ConvSpec.same(cfg.fused_channels, cfg.num_classes, (1, 1))}, {}))
    return mods


def param_shapes(cfg: ModelConfig):
    """Every stored parameter tensor name with its shape, in build order."""
    out = []
    for name, _, led, _ in model_ledger(cfg):
        for key, spec in led.items():
            out.extend(tensor_shapes(f"{name}.{key}", spec))
    return out


# ---------------------------------------------------------------------------
# model


@dataclass
class Model:
    cfg: ModelConfig
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self._ledger = model_ledger(self.cfg)

    def num_params(self):
        return sum(v.size for v in self.params.values())

    def dilations(self):
        """Per-stage dilation rates read back from the built block convs."""
        stages = [[] for _ in range(4)]
        for name, kind, led, _ in self._ledger:
            if name.startswith("stage"):
                s = int(name[5]) - 1
                spec = led.get("b2.v")
                stages[s].append(spec.dilation[0] if spec is not None else 1)
        return tuple(tuple(s) for s in stages)

    def graph(self, image):
        """Forward pass as autodiff nodes; returns ``(logits, taps)``."""
        image = ad.const(image)
        cfg = self.cfg
        if image.shape != (3, cfg.height, cfg.width):
            raise ShapeError(f"image shape {image.shape} != expected (3, {cfg.height}, {cfg.width})")
        p = ad.Params(self.params)
        taps = {}
        x = image
        tokens = None
        for name, kind, led, extra in self._ledger:
            sub = p.sub(name)
            if kind in ("stem", "down") and name != "tstem":
                x = _conv_stack(x, sub, led)
            elif name.startswith("stage"):
                x = hape_forward(x, sub, extra["dilation"], kind)
            elif name == "tstem":
                taps["F"] = x
                t = _conv_stack(image, sub, led)
                taps["Xt"] = t
            elif kind == "embed":
                tokens = patch_embed(t, cfg.patch, sub["proj.weight"])
            elif kind == "et":
                tokens = et_block(tokens, sub, cfg.et)
            elif name == "cnn_norm":
                x = channel_norm(x, sub["gamma"], sub["beta"])
            elif kind == "norm":
                tokens = TokenGrid(ad.layer_norm(tokens.tokens, sub["gamma"], sub["beta"], LN_EPS), tokens.grid)
            elif name == "fusion":
                taps["T"] = tokens.tokens
                f = taps["F"]
                t_map = reshape_tokens_to_map(tokens, cfg.token_channels, cfg.patch, f.shape[1:])
                taps["T_map"] = t_map
                x = fuse(t_map, f, sub, kind)
                taps["Z"] = x
            elif kind == "decoder":
                taps.setdefault("F", x)
                logits = conv(sub, "cls", x, led["cls"])
                logits = ad.bilinear_upsample(logits, (cfg.height, cfg.width))
        taps["logits"] = logits
        return logits, taps

    def forward(self, image):
        return self.graph(image)[0].value

    def forward_with_taps(self, image):
        logits, taps = self.graph(image)
        return logits.value, {k: v.value for k, v in taps.items()}

    def train_step(self, image, labels, lr):
        return train_step(self, image, labels, lr)

    def save(self, path):
        save_params(path, self.params)


def channel_norm(x, gamma, beta):
    """Per-pixel layer norm across channels of a ``[C, H, W]`` map."""
    c, h, w = x.shape
    t = ad.transpose2d(ad.reshape(x, (c, h * w)))
    t = ad.layer_norm(t, gamma, beta, LN_EPS)
    return ad.reshape(ad.transpose2d(t), (c, h, w))


def _conv_stack(x, p, led):
    for key, spec in led.items():
        if isinstance(spec, ConvSpec):
            x = conv(p, key, x, spec)
        else:
            x = ad.prelu(x, p[key])
    return x


def build(cfg: ModelConfig | None = None, seed=0) -> Model:
    cfg = (cfg or ModelConfig()).validate()
    rng = np.random.default_rng(seed)
    params = {}
    for name, kind, led, _ in model_ledger(cfg):
        sub = init_params(led, rng, prefix=name + ".")
        if kind == "decoder" and cfg.decoder_init == "zero":
            sub = {k: np.zeros_like(v) for k, v in sub.items()}
        if name.startswith("stage") and cfg.residual_init == "zero":
            # blocks start as identity (+ shuffle); no normalization layers keep scale otherwise
            sub[name + ".expand.weight"][:] = 0
        params.update(sub)
    return Model(cfg, params)


def train_step(model: Model, image, labels, lr):
    """One plain gradient-descent step on pixelwise cross-entropy; returns
    the loss before the update."""
    with ad.Tape() as tape:
        logits, _ = model.graph(image)
        loss = ad.cross_entropy(logits, labels)
        grads = tape.backward(loss)
    for name, g in grads.items():
        model.params[name] -= (lr * g).astype(model.params[name].dtype)
    return float(loss.value[0])


# ---------------------------------------------------------------------------
# parameter container: "HAFK", u32 version, u32 count, then records

MAGIC = b"HAFK"
VERSION = 1


def save_params(path, params):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(params)))
        for name, arr in params.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_params(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a HAFK parameter file")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    off = 12
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, off)
            off += 4
            name = data[off:off + n].decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<I", data, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}I", data, off)
            off += 4 * rank
            size = int(np.prod(shape)) if rank else 1
            if off + 4 * size > len(data):
                raise ValueError(f"{path}: truncated tensor {name!r}")
            out[name] = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shape).astype(DTYPE)
            off += 4 * size
    except struct.error:
        raise ValueError(f"{path}: truncated file") from None
    return out


def load_model(path, cfg: ModelConfig) -> Model:
    """Load parameters and check them against the builder's shape ledger."""
    stored = read_params(path)
    expected = dict(param_shapes(cfg))
    for name, shape in expected.items():
        if name not in stored:
            raise ValueError(f"weights file is missing tensor {name!r}")
        if stored[name].shape != tuple(shape):
            raise ValueError(f"tensor {name!r} has shape {stored[name].shape}, model expects {tuple(shape)}")
    extra = set(stored) - set(expected)
    if extra:
        raise ValueError(f"weights file has unexpected tensor {sorted(extra)[0]!r}")
    return Model(cfg.validate(), {name: stored[name] for name in expected})


# ---------------------------------------------------------------------------
# synthetic overfit task


QUADRANT_COLORS = np.array([[0.8, 0.3, 0.2], [0.2, 0.5, 0.9]], dtype=np.float32)


def quadrant_task(height=64, width=64, seed=0, noise=0.05):
    """3xHxW image and a 2-class label map split into diagonal quadrants."""
    y = np.arange(height)[:, None] < height // 2
    x = np.arange(width)[None, :] < width // 2
    labels = (y ^ x).astype(np.int64)
    rng = np.random.default_rng(seed)
    img = QUADRANT_COLORS[labels].transpose(2, 0, 1)
    img = img + noise * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32), labels


def overfit_config(base: ModelConfig | None = None, size=64) -> ModelConfig:
    return replace(base or ModelConfig(), num_classes=2, height=size, width=size, decoder_init="zero")


def overfit(cfg: ModelConfig, seed=0, steps=200, lr=0.05, callback=None):
    """Train on the quadrant task; returns the pre-update loss of every step
    plus the loss after the final update."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    model = build(cfg, seed)
    img, labels = quadrant_task(cfg.height, cfg.width, seed)
    losses = []
    for i in range(steps):
        loss = train_step(model, img, labels, lr)
        losses.append(loss)
        if callback is not None:
            callback(i, loss)
        if not np.isfinite(loss):
            return losses
    logits = model.forward(img)
    losses.append(float(ad.cross_entropy(logits, labels).value[0]))
    return losses
