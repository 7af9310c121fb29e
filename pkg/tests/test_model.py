import numpy as np
import pytest

from relmotion import model as M
from relmotion import tensor_ops as T

RNG = np.random.default_rng(7)


def rand_input(cfg, scale=0.3):
    shape = (cfg.input_frames,) + cfg.input_resolution + (3,)
    return (RNG.standard_normal(shape) * scale).astype(np.float32)


# ------------------------------------------------------------- ArchConfig

def test_variant_mapping_matches_ablation_table():
    rows = {
        "C3D": (False, False, False, False, False),
        "FD-C3D": (True, False, False, False, False),
        "FD-D": (True, True, False, False, False),
        "FD-D-MT": (True, True, True, False, True),
        "FD-D-STA-NT": (True, True, True, True, False),
        "FD-D-STA-T": (True, True, True, True, True),
    }
    for name, (fd, deep, sta, mult, sup) in rows.items():
        c = M.ArchConfig.from_variant(name)
        assert (c.use_frame_diff, c.deep, c.use_sta_layer,
                c.multiply_attention, c.supervise_sta) == (fd, deep, sta, mult, sup)
        assert c.filters_per_layer == 16
        assert c.input_resolution == (90, 160)
    assert M.ArchConfig.from_variant("FD-D-STA-T-H").input_resolution == (180, 320)
    assert M.ArchConfig.from_variant("FD-D-STA-T-32").filters_per_layer == 32
    c = M.ArchConfig.from_variant("FD-D-STA-T-H-32")
    assert c.input_resolution == (180, 320) and c.filters_per_layer == 32


def test_inconsistent_flags_rejected():
    with pytest.raises(ValueError):
        M.ArchConfig(use_sta_layer=False, multiply_attention=True, supervise_sta=False)
    with pytest.raises(ValueError):
        M.ArchConfig(deep=False, use_sta_layer=True,
                     multiply_attention=False, supervise_sta=False)


def test_unknown_variant():
    with pytest.raises(ValueError):
        M.ArchConfig.from_variant("FD-X")


# ------------------------------------------------------------- build / count

def test_kernel_list_replays_network_table():
    cfg = M.ArchConfig.from_variant("FD-D-STA-T")
    names = [n for n, _ in M.kernel_shapes(cfg)]
    assert names == (
        [f"conv{i}" for i in range(1, 6)] + ["sta"]
        + [f"conv{i}" for i in range(6, 10)]
        + ["head_pv", "head_people", "head_vehicle"]
    )
    shapes = dict(M.kernel_shapes(cfg))
    assert shapes["conv1"] == (3, 3, 3, 3, 16)
    assert shapes["conv5"] == (3, 3, 3, 16, 16)
    assert shapes["sta"] == (3, 3, 3, 16, 2)
    assert shapes["conv9"] == (3, 3, 3, 16, 16)
    assert shapes["head_pv"] == (1, 1, 1, 16, 2)


def test_param_count_full_model():
    cfg = M.ArchConfig.from_variant("FD-D-STA-T")
    # conv1 1,312 + conv2-5 4x6,928 + sta 866 + conv6-9 4x6,928 + 3 heads x34
    assert M.param_count(cfg) == 1312 + 4 * 6928 + 866 + 4 * 6928 + 3 * 34 == 57704


def test_param_count_basic_models():
    assert M.param_count(M.ArchConfig.from_variant("C3D")) == 29126
    assert M.param_count(M.ArchConfig.from_variant("FD-C3D")) == 29126


def test_param_count_filters_scaling():
    c16 = M.ArchConfig.from_variant("FD-D-STA-T")
    c32 = M.ArchConfig.from_variant("FD-D-STA-T-32")
    w16 = dict(M.kernel_shapes(c16))["conv3"]
    w32 = dict(M.kernel_shapes(c32))["conv3"]
    assert np.prod(w32) == 4 * np.prod(w16)  # c_in and c_out both double


def test_build_deterministic():
    cfg = M.ArchConfig.from_variant("FD-D-STA-T", input_resolution=(45, 80))
    a = M.build(cfg, seed=11)
    b = M.build(cfg, seed=11)
    for name in a.kernels:
        np.testing.assert_array_equal(a.kernels[name].weights, b.kernels[name].weights)
        np.testing.assert_array_equal(a.kernels[name].bias, b.kernels[name].bias)
    c = M.build(cfg, seed=12)
    assert any(
        not np.array_equal(a.kernels[n].weights, c.kernels[n].weights)
        for n in a.kernels
    )


def test_build_bias_zero_and_bounds():
    cfg = M.ArchConfig.from_variant("FD-D")
    p = M.build(cfg, seed=0)
    for name, k in p.kernels.items():
        assert not k.bias.any()
        kt, kh, kw, ci, co = k.weights.shape
        bound = np.sqrt(6.0 / (kt * kh * kw * ci + kt * kh * kw * co))
        assert np.abs(k.weights).max() <= bound


# ------------------------------------------------------------- forward

@pytest.fixture(scope="module")
def full_forward():
    cfg = M.ArchConfig.from_variant("FD-D-STA-T")
    params = M.build(cfg, seed=3)
    x = (np.random.default_rng(5).standard_normal((15, 90, 160, 3)) * 0.2).astype(
        np.float32
    )
    return cfg, params, x, M.forward(params, x)


def test_forward_full_resolution_outputs(full_forward):
    _, _, _, out = full_forward
    assert out.head_probs.shape == (3, 2)
    assert out.attention_mask.shape == (15, 3, 5, 1)
    assert out.attention_logits.shape == (15, 3, 5, 2)


def test_forward_replays_all_table_input_sizes(full_forward):
    _, _, x, out = full_forward
    cache = out.cache
    trunk_in = [lc.conv_in.shape for lc in cache.trunk]
    assert trunk_in == [
        (15, 90, 160, 3),
        (15, 45, 80, 16),
        (15, 23, 40, 16),
        (15, 12, 20, 16),
        (15, 6, 10, 16),
    ]
    assert cache.features.shape == (15, 3, 5, 16)  # attention layer input
    tail_in = [lc.conv_in.shape for lc in cache.tail]
    assert tail_in == [
        (15, 3, 5, 16),
        (8, 3, 5, 16),
        (4, 3, 5, 16),
        (2, 3, 5, 16),
    ]
    assert cache.gap_in.shape == (1, 3, 5, 16)
    assert cache.gap_out.shape == (1, 1, 1, 16)


def test_forward_probability_invariants(full_forward):
    _, _, _, out = full_forward
    np.testing.assert_allclose(out.head_probs.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(out.attention_mask > 0) and np.all(out.attention_mask < 1)
    assert np.all(np.isfinite(out.head_probs))


def test_forward_deterministic(full_forward):
    _, params, x, out = full_forward
    again = M.forward(params, x)
    np.testing.assert_array_equal(out.head_probs, again.head_probs)
    np.testing.assert_array_equal(out.attention_mask, again.attention_mask)


def test_forward_multiplies_attention_only_when_enabled():
    cfg = M.ArchConfig.from_variant(
        "FD-D-MT", input_resolution=(45, 80), input_frames=5
    )
    params = M.build(cfg, seed=1)
    x = rand_input(cfg)
    out = M.forward(params, x)
    # mask computed but unused: conv6 consumes pool5 output unchanged
    np.testing.assert_array_equal(out.cache.tail[0].conv_in, out.cache.features)
    assert out.attention_mask is not None


def test_forward_basic_stack_pre_gap_shape():
    cfg = M.ArchConfig.from_variant("C3D")
    params = M.build(cfg, seed=2)
    x = rand_input(cfg)
    out = M.forward(params, x)
    assert out.cache.trunk[-1].out.shape == (1, 3, 5, 16)
    assert out.cache.gap_in.shape == (1, 3, 5, 16)
    assert out.attention_mask is None and out.attention_logits is None
    assert out.head_probs.shape == (3, 2)


def test_forced_full_mask_equals_no_multiply():
    cfg_t = M.ArchConfig.from_variant(
        "FD-D-STA-T", input_resolution=(45, 80), input_frames=5
    )
    cfg_mt = M.ArchConfig.from_variant(
        "FD-D-MT", input_resolution=(45, 80), input_frames=5
    )
    params_t = M.build(cfg_t, seed=9)
    # force the attention channel to probability exactly 1.0 in float32
    sta = params_t.kernels["sta"]
    forced = T.ConvKernel(
        weights=np.zeros_like(sta.weights),
        bias=np.array([-60.0, 60.0], np.float32),
    )
    kernels = dict(params_t.kernels)
    kernels["sta"] = forced
    params_t = M.ModelParams(config=cfg_t, kernels=kernels)
    params_mt = M.ModelParams(config=cfg_mt, kernels=dict(kernels))
    x = rand_input(cfg_t)
    out_t = M.forward(params_t, x)
    out_mt = M.forward(params_mt, x)
    assert np.all(out_t.attention_mask == 1.0)
    np.testing.assert_array_equal(out_t.head_probs, out_mt.head_probs)


def test_forward_shape_mismatch():
    cfg = M.ArchConfig.from_variant("FD-D-STA-T", input_resolution=(45, 80))
    params = M.build(cfg, seed=0)
    with pytest.raises(T.ShapeError):
        M.forward(params, np.zeros((15, 90, 160, 3), np.float32))


def test_sta_dims():
    assert M.sta_dims(M.ArchConfig.from_variant("FD-D-STA-T")) == (15, 3, 5)
    assert M.sta_dims(
        M.ArchConfig.from_variant("FD-D-STA-T", input_resolution=(45, 80))
    ) == (15, 2, 3)
    assert M.sta_dims(M.ArchConfig.from_variant("FD-D-STA-T-H")) == (15, 6, 10)


# ------------------------------------------------------------- serialization

def test_save_load_roundtrip(tmp_path):
    cfg = M.ArchConfig.from_variant(
        "FD-D-STA-T", input_resolution=(45, 80), input_frames=5
    )
    params = M.build(cfg, seed=4)
    p1, p2 = tmp_path / "a.rmnt", tmp_path / "b.rmnt"
    M.save(params, p1)
    loaded = M.load(p1)
    M.save(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    x = rand_input(cfg)
    np.testing.assert_array_equal(
        M.forward(params, x).head_probs, M.forward(loaded, x).head_probs
    )


def test_model_file_size_under_one_megabyte(tmp_path):
    cfg = M.ArchConfig.from_variant("FD-D-STA-T")
    params = M.build(cfg, seed=0)
    path = tmp_path / "m.rmnt"
    M.save(params, path)
    size = path.stat().st_size
    assert size < 1_048_576
    assert size >= 57704 * 4  # header + raw float32 payload


def test_load_corrupt_magic(tmp_path):
    path = tmp_path / "bad.rmnt"
    path.write_bytes(b"XXXX" + b"\x00" * 64)
    with pytest.raises(M.ModelFormatError):
        M.load(path)


def test_load_truncated(tmp_path):
    cfg = M.ArchConfig.from_variant("C3D", input_resolution=(45, 80))
    params = M.build(cfg, seed=0)
    path = tmp_path / "m.rmnt"
    M.save(params, path)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(M.ModelFormatError):
        M.load(path)


def test_load_fingerprint_mismatch(tmp_path):
    cfg = M.ArchConfig.from_variant("C3D", input_resolution=(45, 80))
    params = M.build(cfg, seed=0)
    path = tmp_path / "m.rmnt"
    M.save(params, path)
    blob = bytearray(path.read_bytes())
    i = blob.find(b"fingerprint=") + len(b"fingerprint=")
    blob[i] = ord("0") if blob[i] != ord("0") else ord("1")
    path.write_bytes(bytes(blob))
    with pytest.raises(M.ModelFormatError):
        M.load(path)
