import struct

import numpy as np
import pytest

from avfusion import autodiff as ad
from avfusion import binio
from avfusion.metrics import ccc_loss
from avfusion.model import (
    ModelConfig,
    cross_modal_fuse,
    encoder_forward,
    init_params,
    load_checkpoint,
    model_forward,
    multi_head_attention,
    param_shapes,
    positional_encoding,
    save_checkpoint,
)

SMALL = ModelConfig(d_audio=5, d_video=4, num_layers=1, d_model=8, num_heads=2,
                    ffn_mult=2, seq_len=6)


def small_inputs(seed=0, config=SMALL):
    rng = np.random.default_rng(seed)
    return (ad.Tensor(rng.uniform(-1, 1, (config.seq_len, config.d_audio))),
            ad.Tensor(rng.uniform(-1, 1, (config.seq_len, config.d_video))))


def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        ModelConfig(d_audio=4, d_video=4, d_model=10, num_heads=4)
    with pytest.raises(ValueError, match=">= 1"):
        ModelConfig(d_audio=0, d_video=4)


def test_init_params_deterministic():
    a = init_params(SMALL, seed=7)
    b = init_params(SMALL, seed=7)
    assert list(a) == list(b)
    for name in a:
        np.testing.assert_array_equal(a[name].data, b[name].data)


def test_init_params_fusion_scalars_start_at_one():
    params = init_params(SMALL, seed=0)
    assert float(params["fusion.alpha"].data) == 1.0
    assert float(params["fusion.beta"].data) == 1.0


def test_init_params_glorot_bound():
    params = init_params(SMALL, seed=3)
    for name, shape in param_shapes(SMALL).items():
        if len(shape) == 2:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            assert np.max(np.abs(params[name].data)) <= limit, name


def test_positional_encoding_range_and_determinism():
    pe = positional_encoding(100, 16)
    assert pe.shape == (100, 16)
    assert np.all(pe >= -1.0) and np.all(pe <= 1.0)
    np.testing.assert_array_equal(pe, positional_encoding(100, 16))


# --- attention ---


def _mha_weights():
    return (ad.Tensor([[1.0, 0.5], [0.0, 1.0]]),
            ad.Tensor([[0.0, 1.0], [1.0, 0.0]]),
            ad.Tensor([[1.0, 1.0], [0.0, 1.0]]),
            ad.Tensor([[2.0, 0.0], [1.0, 2.0]]))


def test_attention_output_shape():
    params = init_params(SMALL, seed=1)
    a, _ = small_inputs(1)
    enc = encoder_forward(a, params, "audio", SMALL)
    out = multi_head_attention(enc, enc,
                               params["audio.layers.0.attn.Wq"], params["audio.layers.0.attn.Wk"],
                               params["audio.layers.0.attn.Wv"], params["audio.layers.0.attn.Wo"],
                               SMALL.num_heads)
    assert out.data.shape == (SMALL.seq_len, SMALL.d_model)


def test_attention_single_key_weight_is_one():
    wq, wk, wv, wo = _mha_weights()
    kv = ad.Tensor([[0.3, -0.7]])
    out = multi_head_attention(ad.Tensor([[1.0, 2.0]]), kv, wq, wk, wv, wo, num_heads=1)
    np.testing.assert_array_equal(out.data, kv.data @ wv.data @ wo.data)


def test_attention_hand_computed_oracle():
    # single head, d=2, T=2; expected values computed by hand from
    # softmax((q_src Wq)(kv_src Wk)^T / sqrt(2)) (kv_src Wv) Wo
    wq, wk, wv, wo = _mha_weights()
    out = multi_head_attention(ad.Tensor([[1.0, 0.0], [-1.0, 1.0]]),
                               ad.Tensor([[1.0, 2.0], [3.0, 4.0]]),
                               wq, wk, wv, wo, num_heads=1)
    expected = np.array([[12.143665588278637, 13.143665588278637],
                         [7.641907605386745, 8.641907605386745]])
    np.testing.assert_allclose(out.data, expected, atol=1e-10)


# --- encoder ---


def test_encoder_output_shape():
    params = init_params(SMALL, seed=2)
    a, _ = small_inputs(2)
    assert encoder_forward(a, params, "audio", SMALL).data.shape == (6, 8)


def test_encoder_zero_input_is_finite_and_deterministic():
    params = init_params(SMALL, seed=4)
    zero = ad.Tensor(np.zeros((6, 5)))
    out1 = encoder_forward(zero, params, "audio", SMALL)
    out2 = encoder_forward(ad.Tensor(np.zeros((6, 5))), params, "audio", SMALL)
    assert np.all(np.isfinite(out1.data))
    np.testing.assert_array_equal(out1.data, out2.data)


def test_encoder_attention_is_global():
    params = init_params(SMALL, seed=5)
    a, _ = small_inputs(5)
    bumped = a.data.copy()
    bumped[3] += 0.5  # change one frame only
    out1 = encoder_forward(a, params, "audio", SMALL)
    out2 = encoder_forward(ad.Tensor(bumped), params, "audio", SMALL)
    assert not np.array_equal(out1.data, out2.data)


# --- fusion ---


def test_fuse_zero_scalars_reduce_to_sum():
    params = init_params(SMALL, seed=6)
    params["fusion.alpha"].data[...] = 0.0
    params["fusion.beta"].data[...] = 0.0
    rng = np.random.default_rng(6)
    enc_a = ad.Tensor(rng.normal(size=(6, 8)))
    enc_v = ad.Tensor(rng.normal(size=(6, 8)))
    fused = cross_modal_fuse(enc_a, enc_v, params, SMALL.num_heads)
    np.testing.assert_array_equal(fused.data, enc_a.data + enc_v.data)


def test_fuse_output_shape():
    params = init_params(SMALL, seed=7)
    rng = np.random.default_rng(7)
    fused = cross_modal_fuse(ad.Tensor(rng.normal(size=(6, 8))),
                             ad.Tensor(rng.normal(size=(6, 8))), params, 2)
    assert fused.data.shape == (6, 8)


def test_fuse_symmetric_under_tied_weights():
    params = init_params(SMALL, seed=8)
    for w in ("Wq", "Wk", "Wv", "Wo"):
        params[f"cross.video.attn.{w}"] = params[f"cross.audio.attn.{w}"]
    params["fusion.beta"] = params["fusion.alpha"]
    rng = np.random.default_rng(8)
    enc_a = ad.Tensor(rng.normal(size=(6, 8)))
    enc_v = ad.Tensor(rng.normal(size=(6, 8)))
    ab = cross_modal_fuse(enc_a, enc_v, params, SMALL.num_heads)
    ba = cross_modal_fuse(enc_v, enc_a, params, SMALL.num_heads)
    np.testing.assert_allclose(ab.data, ba.data, atol=1e-12)


# --- full model ---


def test_model_forward_paper_shape():
    config = ModelConfig(d_audio=3900, d_video=4096)  # 2 layers, 512 nodes, 4 heads
    params = init_params(config, seed=0)
    rng = np.random.default_rng(0)
    out = model_forward(ad.Tensor(rng.normal(size=(100, 3900))),
                        ad.Tensor(rng.normal(size=(100, 4096))), params, config)
    assert out.data.shape == (100, 2)


def test_model_forward_wrong_seq_len():
    params = init_params(SMALL, seed=1)
    with pytest.raises(ad.ShapeError):
        model_forward(ad.Tensor(np.zeros((5, 5))), ad.Tensor(np.zeros((5, 4))), params, SMALL)


def test_model_is_pure_function_of_inputs():
    params = init_params(SMALL, seed=9)
    audio, _ = small_inputs(9)
    v1 = np.zeros((6, 4))
    out1 = model_forward(audio, ad.Tensor(v1), params, SMALL)
    out2 = model_forward(audio, ad.Tensor(np.zeros((6, 4))), params, SMALL)
    np.testing.assert_array_equal(out1.data, out2.data)


def test_model_deterministic_across_runs():
    def run():
        params = init_params(SMALL, seed=10)
        audio, video = small_inputs(10)
        return model_forward(audio, video, params, SMALL).data

    np.testing.assert_array_equal(run(), run())


def test_zeroed_video_hides_original_content():
    params = init_params(SMALL, seed=11)
    audio, _ = small_inputs(11)
    rng = np.random.default_rng(99)
    video_a = rng.normal(size=(6, 4))
    video_b = rng.normal(size=(6, 4)) + 3.0
    out_a = model_forward(audio, ad.Tensor(np.zeros_like(video_a)), params, SMALL)
    out_b = model_forward(audio, ad.Tensor(np.zeros_like(video_b)), params, SMALL)
    np.testing.assert_array_equal(out_a.data, out_b.data)


def test_fusion_scalars_receive_gradient():
    params = init_params(SMALL, seed=12)
    audio, video = small_inputs(12)
    gold = np.random.default_rng(12).uniform(-1, 1, (6, 2))
    pred = model_forward(audio, video, params, SMALL)
    ad.backward(ccc_loss(pred, gold))
    assert abs(float(params["fusion.alpha"].grad)) > 0.0
    assert abs(float(params["fusion.beta"].grad)) > 0.0


# --- checkpoints ---


def test_checkpoint_roundtrip(tmp_path):
    params = init_params(SMALL, seed=13)
    path = tmp_path / "m.ckpt"
    save_checkpoint(params, SMALL, path)
    loaded, config = load_checkpoint(path)
    assert config == SMALL
    assert list(loaded) == list(params)
    for name in params:
        assert loaded[name].data.shape == params[name].data.shape
        np.testing.assert_array_equal(loaded[name].data,
                                      params[name].data.astype(np.float32).astype(np.float64))


def test_checkpoint_double_roundtrip_is_exact(tmp_path):
    params = init_params(SMALL, seed=14)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(params, SMALL, p1)
    loaded1, _ = load_checkpoint(p1)
    save_checkpoint(loaded1, SMALL, p2)
    loaded2, _ = load_checkpoint(p2)
    for name in loaded1:
        np.testing.assert_array_equal(loaded1[name].data, loaded2[name].data)
    assert p1.read_bytes()[8:] == p2.read_bytes()[8:]  # identical payload


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(init_params(SMALL, seed=15), SMALL, path)
    raw = bytearray(path.read_bytes())
    raw[0] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(binio.BadMagicError, match="bad magic"):
        load_checkpoint(path)


def test_checkpoint_version_mismatch(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(init_params(SMALL, seed=16), SMALL, path)
    raw = bytearray(path.read_bytes())
    raw[4:8] = struct.pack("<I", 99)
    path.write_bytes(bytes(raw))
    with pytest.raises(binio.VersionMismatchError, match="version"):
        load_checkpoint(path)


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(init_params(SMALL, seed=17), SMALL, path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(binio.TruncatedFileError, match="truncated"):
        load_checkpoint(path)


def test_checkpoint_shape_inconsistency(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(init_params(SMALL, seed=18), SMALL, path)
    raw = bytearray(path.read_bytes())
    name = b"audio.in_proj.W"
    at = raw.index(name) + len(name) + 1  # first dim u32 follows the rank byte
    raw[at:at + 4] = struct.pack("<I", SMALL.d_audio + 1)
    path.write_bytes(bytes(raw))
    with pytest.raises(binio.FileFormatError, match="shape inconsistency"):
        load_checkpoint(path)
