"""Video and text encoder structure: token layout, masking, symmetries."""

import numpy as np
import pytest

from miles import autodiff as ad
from miles.autodiff import Tensor
from miles.encoders import (
    EncoderConfig,
    apply_mask_and_positions,
    init_pixel_head,
    init_text_params,
    init_video_params,
    patch_pixels,
    patchify,
    similarity,
    similarity_matrix,
    text_forward,
    video_forward,
)
from miles.errors import ConfigError, ContractError, DimensionError


def tiny_cfg(**kw) -> EncoderConfig:
    base = dict(patch_size=8, channels=3, embed_dim=16, depth=2, heads=2,
                max_frames=4, patches_per_frame=16, proj_dim=8,
                text_max_len=12, vocab_size=24)
    base.update(kw)
    return EncoderConfig(**base)


def _video_inputs(cfg, b=2, m=3, seed=0):
    rng = np.random.default_rng(seed)
    side = cfg.patch_size * 4  # 4x4 patch grid
    frames = rng.random((b, m, side, side, cfg.channels)).astype(np.float32)
    mask = np.zeros((b, m, cfg.patches_per_frame), dtype=bool)
    return frames, mask


def _run_video(cfg, frames, mask, params):
    tokens = patchify(frames, params, cfg)
    seq = apply_mask_and_positions(tokens, mask, params, cfg)
    return video_forward(seq, mask, params, cfg)


def test_patch_pixels_layout():
    # patch vectors must be the (P, P, C) block flattened row-major,
    # ordered frame-major then row-major over the grid
    cfg = tiny_cfg(patch_size=2, channels=1, patches_per_frame=4)
    frames = np.arange(2 * 4 * 4, dtype=np.float32).reshape(1, 2, 4, 4, 1)
    flat = patch_pixels(frames, cfg)
    assert flat.shape == (1, 8, 4)
    np.testing.assert_array_equal(flat[0, 0], [0, 1, 4, 5])     # frame 0, top-left
    np.testing.assert_array_equal(flat[0, 1], [2, 3, 6, 7])     # frame 0, top-right
    np.testing.assert_array_equal(flat[0, 4], [16, 17, 20, 21])  # frame 1, top-left


def test_token_counts():
    cfg = tiny_cfg()
    params = init_video_params(cfg, np.random.default_rng(0))
    frames, mask = _video_inputs(cfg, b=2, m=3)
    tokens = patchify(frames, params, cfg)
    assert tokens.shape == (2, 3 * 16, cfg.embed_dim)
    seq = apply_mask_and_positions(tokens, mask, params, cfg)
    assert seq.shape == (2, 1 + 3 * 16, cfg.embed_dim)
    enc = video_forward(seq, mask, params, cfg)
    assert enc.cls.shape == (2, cfg.proj_dim)
    assert enc.patch_features.shape == (2, 3 * 16, cfg.embed_dim)
    assert enc.masked_features.shape == (0, cfg.embed_dim)
    np.testing.assert_array_equal(enc.masked_counts, [0, 0])


def test_cls_rows_unit_norm():
    cfg = tiny_cfg()
    params = init_video_params(cfg, np.random.default_rng(1))
    frames, mask = _video_inputs(cfg)
    enc = _run_video(cfg, frames, mask, params)
    np.testing.assert_allclose(np.linalg.norm(enc.cls.data, axis=1), 1.0, atol=1e-5)

    tparams = init_text_params(cfg, np.random.default_rng(2))
    ids = np.array([[0, 3, 4, 5, 1, 1], [0, 6, 7, 8, 9, 1]])
    tenc = text_forward(ids, tparams, cfg)
    np.testing.assert_allclose(np.linalg.norm(tenc.cls.data, axis=1), 1.0, atol=1e-5)


def test_temporal_table_zero_init_gives_frame_symmetry():
    # identical frames + zero temporal table: every frame's final features
    # must coincide, and permuting distinct frames must not move [CLS]
    cfg = tiny_cfg()
    params = init_video_params(cfg, np.random.default_rng(3))
    assert not params["pos_temporal"].data.any()

    rng = np.random.default_rng(4)
    side = cfg.patch_size * 4
    one = rng.random((1, 1, side, side, 3)).astype(np.float32)
    frames = np.repeat(one, 3, axis=1)
    mask = np.zeros((1, 3, 16), dtype=bool)
    enc = _run_video(cfg, frames, mask, params)
    per_frame = enc.patch_features.data.reshape(3, 16, cfg.embed_dim)
    np.testing.assert_allclose(per_frame[1], per_frame[0], atol=1e-5)
    np.testing.assert_allclose(per_frame[2], per_frame[0], atol=1e-5)

    distinct = rng.random((1, 3, side, side, 3)).astype(np.float32)
    enc_a = _run_video(cfg, distinct, mask, params)
    enc_b = _run_video(cfg, distinct[:, ::-1], mask, params)
    np.testing.assert_allclose(enc_b.cls.data, enc_a.cls.data, atol=1e-5)


def test_padding_invariance():
    # growing the [PAD] suffix must not change the [CLS] embedding: pad keys
    # carry a -1e9 bias so their softmax weight underflows to exactly zero;
    # only blas summation-order noise at the float32 scale may remain
    cfg = tiny_cfg()
    params = init_text_params(cfg, np.random.default_rng(5))
    short = np.array([[0, 3, 4, 5, 1, 1]])
    long = np.array([[0, 3, 4, 5, 1, 1, 1, 1, 1, 1]])
    a = text_forward(short, params, cfg)
    b = text_forward(long, params, cfg)
    np.testing.assert_allclose(a.cls.data, b.cls.data, atol=1e-6)


def test_masked_features_follow_grid():
    cfg = tiny_cfg()
    params = init_video_params(cfg, np.random.default_rng(6))
    frames, mask = _video_inputs(cfg, b=2, m=2)
    mask[0, :, 3] = True   # a tube in sample 0
    mask[1, 0, :5] = True  # five positions in sample 1, frame 0
    enc = _run_video(cfg, frames, mask, params)
    np.testing.assert_array_equal(enc.masked_counts, [2, 5])
    assert enc.masked_features.shape == (7, cfg.embed_dim)
    flat = enc.patch_features.data.reshape(-1, cfg.embed_dim)
    np.testing.assert_array_equal(
        enc.masked_features.data, flat[np.flatnonzero(mask.reshape(-1))]
    )


def test_mask_token_gets_no_gradient_when_nothing_is_masked():
    cfg = tiny_cfg()
    params = init_video_params(cfg, np.random.default_rng(7))
    frames, mask = _video_inputs(cfg, b=1, m=2)
    with ad.recording():
        enc = _run_video(cfg, frames, mask, params)
        loss = ad.sum_(enc.cls * enc.cls)
    ad.backward(loss)
    g = params["mask_token"].grad
    assert g is None or not np.abs(g).any()


def test_mask_token_replaces_content():
    # masking every position makes token content independent of pixels
    cfg = tiny_cfg()
    params = init_video_params(cfg, np.random.default_rng(8))
    frames_a, _ = _video_inputs(cfg, b=1, m=2, seed=100)
    frames_b, _ = _video_inputs(cfg, b=1, m=2, seed=200)
    mask = np.ones((1, 2, 16), dtype=bool)
    enc_a = _run_video(cfg, frames_a, mask, params)
    enc_b = _run_video(cfg, frames_b, mask, params)
    np.testing.assert_array_equal(enc_a.cls.data, enc_b.cls.data)


def test_single_frame_temporal_attention_is_benign():
    # with M=1, temporal attention degenerates to per-token self-attention;
    # the forward must still run and produce finite outputs
    cfg = tiny_cfg()
    params = init_video_params(cfg, np.random.default_rng(9))
    frames, mask = _video_inputs(cfg, b=2, m=1)
    enc = _run_video(cfg, frames, mask, params)
    assert np.isfinite(enc.cls.data).all()
    assert enc.patch_features.shape == (2, 16, cfg.embed_dim)


def test_text_contract_errors():
    cfg = tiny_cfg()
    params = init_text_params(cfg, np.random.default_rng(10))
    with pytest.raises(ContractError):
        text_forward(np.array([[3, 4, 5]]), params, cfg)  # missing [CLS]
    with pytest.raises(ContractError):
        text_forward(np.array([[0, 99]]), params, cfg)    # id out of range
    with pytest.raises(ContractError):
        text_forward(np.zeros((1, cfg.text_max_len + 1), dtype=np.int64), params, cfg)
    with pytest.raises(DimensionError):
        text_forward(np.array([0, 3, 4]), params, cfg)    # 1-d input


def test_video_shape_errors():
    cfg = tiny_cfg()
    params = init_video_params(cfg, np.random.default_rng(11))
    frames, mask = _video_inputs(cfg, b=1, m=2)
    with pytest.raises(ConfigError):
        patch_pixels(frames[:, :, :24], cfg)  # height not divisible by patch
    with pytest.raises(ConfigError):
        patch_pixels(np.repeat(frames, 3, axis=1), cfg)  # 6 > max_frames
    tokens = patchify(frames, params, cfg)
    with pytest.raises(DimensionError):
        apply_mask_and_positions(tokens, mask[:, :1], params, cfg)
    seq = apply_mask_and_positions(tokens, mask, params, cfg)
    with pytest.raises(DimensionError):
        video_forward(seq, mask[:, :1], params, cfg)


def test_config_validation():
    with pytest.raises(ConfigError):
        tiny_cfg(embed_dim=15).validate()  # not divisible by heads
    with pytest.raises(ConfigError):
        tiny_cfg(depth=0).validate()
    with pytest.raises(ConfigError):
        tiny_cfg(dropout=1.0).validate()


def test_pixel_head_shapes():
    cfg = tiny_cfg()
    head = init_pixel_head(cfg, np.random.default_rng(12))
    assert head["pixel_head.w"].shape == (cfg.embed_dim, cfg.patch_dim)
    assert head["pixel_head.b"].shape == (cfg.patch_dim,)


def test_similarity_helpers():
    v = Tensor(np.array([1.0, 0.0, 2.0]))
    t = Tensor(np.array([0.5, 1.0, 0.25]))
    assert float(similarity(v, t).data) == pytest.approx(1.0)
    vm = Tensor(np.eye(2, 3))
    tm = Tensor(np.ones((4, 3)))
    assert similarity_matrix(vm, tm).shape == (2, 4)
    with pytest.raises(DimensionError):
        similarity(vm, tm)
    with pytest.raises(DimensionError):
        similarity_matrix(vm, Tensor(np.ones((4, 2))))


def test_deterministic_init():
    cfg = tiny_cfg()
    a = init_video_params(cfg, np.random.default_rng(42))
    b = init_video_params(cfg, np.random.default_rng(42))
    assert a.keys() == b.keys()
    for k in a:
        np.testing.assert_array_equal(a[k].data, b[k].data)
