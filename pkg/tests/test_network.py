import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from haformer.network import (
    DILATION_SCHEDULE, VARIANTS, ConfigError, ModelConfig, build, format_config, load_model, param_shapes,
    parse_config, quadrant_task, read_params, save_params, train_step, variant,
)
from haformer.tensor_core import ShapeError

SMALL = replace(ModelConfig(), height=64, width=64)


@pytest.fixture(scope="module")
def small_model():
    return build(SMALL, 0)


def test_same_seed_bitwise_identical():
    a, b = build(SMALL, 7), build(SMALL, 7)
    assert a.params.keys() == b.params.keys()
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    c = build(SMALL, 8)
    assert any(not np.array_equal(a.params[k], c.params[k]) for k in a.params)


def test_default_builds_at_full_resolution():
    m = build(ModelConfig(), 0)
    assert m.cfg.height == 512 and m.cfg.width == 1024
    assert dict(param_shapes(m.cfg)) == {k: v.shape for k, v in m.params.items()}


def test_rm_baseline_topology():
    m = build(variant("rm-baseline", SMALL), 0)
    modules = {k.split(".")[0] for k in m.params}
    assert not modules & {"tstem", "embed", "et", "fusion", "et_norm"}
    assert not any(".pem" in k or "b2." in k for k in m.params)
    assert sum(k.startswith("stage") and k.endswith("b1.v.weight") for k in m.params) == 18


def test_forward_shapes_and_purity(small_model, rng):
    img = rng.random((3, 64, 64)).astype(np.float32)
    logits, taps = small_model.forward_with_taps(img)
    assert logits.shape == (19, 64, 64)
    assert taps["F"].shape == (128, 8, 8)
    assert taps["T"].shape == (16, 128)
    assert taps["Xt"].shape == (128, 4, 4)
    assert taps["Z"].shape == (128, 8, 8)
    np.testing.assert_array_equal(small_model.forward(img), logits)
    with pytest.raises(ShapeError):
        small_model.forward(np.zeros((3, 32, 64), np.float32))


@given(st.sampled_from([(32, 32), (32, 64), (64, 48), (48, 64), (96, 32)]))
def test_shape_ledger(hw):
    h, w = hw
    m = build(replace(SMALL, height=h, width=w), 0)
    logits, taps = m.forward_with_taps(np.zeros((3, h, w), np.float32))
    assert taps["F"].shape == (128, h // 8, w // 8)
    assert taps["T"].shape == ((h // 16) * (w // 16), 128)
    assert logits.shape == (19, h, w)


def test_config_violations_named():
    with pytest.raises(ConfigError, match="divisible by 16"):
        replace(SMALL, height=40).validate()
    with pytest.raises(ConfigError, match="reduction"):
        replace(SMALL, height=48, width=48).validate()
    with pytest.raises(ConfigError, match="stage_depths"):
        replace(SMALL, stage_depths=(3, 6, 6, 2)).validate()
    with pytest.raises(ConfigError, match="dilation_schedule"):
        replace(SMALL, dilation_schedule=((2, 2), (4,) * 6, (4,) * 6, (2, 2, 2))).validate()
    with pytest.raises(ConfigError, match="C_t"):
        replace(SMALL, tstem_channels=(16, 32, 64, 96)).validate()


def test_dilation_walk(small_model):
    assert small_model.dilations() == DILATION_SCHEDULE


def test_logits_finite_for_unit_inputs(rng):
    for seed in range(3):
        m = build(replace(SMALL, residual_init="kaiming"), seed)
        assert np.all(np.isfinite(m.forward(rng.random((3, 64, 64)).astype(np.float32))))


def test_zero_decoder_gives_constant_logits(rng):
    m = build(replace(SMALL, decoder_init="zero"), 0)
    m.params["decoder.cls.bias"][:] = rng.standard_normal(19)
    out = m.forward(rng.random((3, 64, 64)).astype(np.float32))
    assert np.ptp(out, axis=(1, 2)).max() == 0


def test_train_step_closed_forms(rng):
    m = build(replace(SMALL, num_classes=5, decoder_init="zero"), 0)
    img = rng.random((3, 64, 64)).astype(np.float32)
    labels = rng.integers(0, 5, (64, 64))
    assert train_step(m, img, labels, 0.0) == pytest.approx(math.log(5), abs=1e-4)
    before = {k: v.copy() for k, v in m.params.items()}
    assert train_step(m, img, np.full((64, 64), 255), 0.1) == 0.0
    assert all(np.array_equal(before[k], m.params[k]) for k in before)
    with pytest.raises(ValueError):
        train_step(m, img, np.full((64, 64), 5), 0.1)


def test_train_step_mostly_non_increasing():
    cfg = replace(SMALL, height=32, width=32, num_classes=2)
    img, labels = quadrant_task(32, 32, 0)
    ok = 0
    for seed in range(10):
        m = build(cfg, seed)
        losses = [train_step(m, img, labels, 1e-3) for _ in range(10)]
        ok += all(b <= a + 1e-6 for a, b in zip(losses, losses[1:]))
    assert ok >= 8


def test_quadrant_task_layout():
    img, labels = quadrant_task(64, 64, 0)
    assert img.shape == (3, 64, 64) and img.min() >= 0 and img.max() <= 1
    assert labels[0, 0] == 0 and labels[0, 63] == 1 and labels[63, 0] == 1 and labels[63, 63] == 0


def test_config_text_roundtrip():
    assert parse_config(format_config(SMALL)) == SMALL
    cfg = parse_config("# comment\nheight = 64  # trailing\nwidth = 64\nvariant = L1\n")
    assert cfg.et_blocks == 1 and cfg.height == 64
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config("heigth = 64")
    with pytest.raises(ConfigError):
        parse_config("height = sixty")
    with pytest.raises(ConfigError):
        parse_config("just words")


def test_variants_build():
    for name in VARIANTS:
        m = build(variant(name, SMALL), 0)
        assert m.forward(np.zeros((3, 64, 64), np.float32)).shape == (19, 64, 64)


def test_hafk_roundtrip(tmp_path, small_model):
    path = tmp_path / "w.hafk"
    small_model.save(path)
    raw = path.read_bytes()
    assert raw[:4] == b"HAFK" and int.from_bytes(raw[4:8], "little") == 1
    back = load_model(path, SMALL)
    assert all(np.array_equal(back.params[k], small_model.params[k]) for k in small_model.params)


def test_hafk_rejects_mismatch(tmp_path, small_model):
    params = dict(small_model.params)
    params["decoder.cls.weight"] = np.zeros((3, 128, 1, 1), np.float32)
    save_params(tmp_path / "bad.hafk", params)
    with pytest.raises(ValueError, match="decoder.cls.weight"):
        load_model(tmp_path / "bad.hafk", SMALL)
    (tmp_path / "junk.hafk").write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(ValueError, match="HAFK"):
        read_params(tmp_path / "junk.hafk")
    good = (tmp_path / "bad.hafk").read_bytes()
    (tmp_path / "cut.hafk").write_bytes(good[:200])
    with pytest.raises(ValueError, match="truncated"):
        read_params(tmp_path / "cut.hafk")
