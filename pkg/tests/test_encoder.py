import numpy as np
import pytest

from amber.encoder import (EfficientSelfAttention, Encoder, EncoderStage,
                           FeaturePyramid, MixFFN, StageConfig,
                           TransformerBlock, grid_to_tokens, tokens_to_grid)
from amber.gradcheck import check_gradients
from amber.model import ModelConfig, stage_extents
from amber.rng import SplitMix64
from amber.tensor import Tensor, no_grad


def _tokens(rng, b, n, c, dtype=np.float64):
    return Tensor(rng.uniform_array((b, n, c), -1.0, 1.0), dtype=dtype)


# --- stage config ------------------------------------------------------------

def test_stage_config_head_divisibility():
    with pytest.raises(ValueError):
        StageConfig(channels=10, num_blocks=1, num_heads=4, reduction=1)


def test_stage_config_positive_reduction_and_blocks():
    with pytest.raises(ValueError):
        StageConfig(channels=8, num_blocks=1, num_heads=1, reduction=0)
    with pytest.raises(ValueError):
        StageConfig(channels=8, num_blocks=0, num_heads=1, reduction=1)


def test_stage_config_head_dim():
    cfg = StageConfig(channels=16, num_blocks=1, num_heads=4, reduction=2)
    assert cfg.head_dim == 4


# --- token/grid layout ---------------------------------------------------------

def test_tokens_grid_round_trip():
    rng = SplitMix64(0)
    tokens = _tokens(rng, 2, 24, 5)
    grid = tokens_to_grid(tokens, (2, 3, 4))
    assert grid.shape == (2, 5, 2, 3, 4)
    back = grid_to_tokens(grid)
    assert np.array_equal(back.data, tokens.data)


def test_tokens_to_grid_row_major_order():
    # token index n maps to (d, h, w) = unravel(n) in row-major order
    n_tokens = 2 * 3 * 4
    tokens = Tensor(np.arange(n_tokens, dtype=np.float64).reshape(1, n_tokens, 1))
    grid = tokens_to_grid(tokens, (2, 3, 4)).data[0, 0]
    assert grid[0, 0, 0] == 0
    assert grid[0, 0, 1] == 1  # w fastest
    assert grid[0, 1, 0] == 4  # then h
    assert grid[1, 0, 0] == 12  # then d


def test_tokens_to_grid_rejects_count_mismatch():
    with pytest.raises(ValueError):
        tokens_to_grid(Tensor(np.zeros((1, 10, 3), dtype=np.float32)), (2, 2, 2))


# --- efficient self attention ---------------------------------------------------

def _dense_mha_oracle(x: np.ndarray, attn: EfficientSelfAttention) -> np.ndarray:
    """Plain-numpy full multi-head attention from the layer's weights."""
    b, n, c = x.shape
    h = attn.num_heads
    d = c // h

    def lin(arr, layer):
        return arr @ layer.weight.data + layer.bias.data

    def split(arr):
        return arr.reshape(b, n, h, d).transpose(0, 2, 1, 3)

    q, k, v = split(lin(x, attn.q)), split(lin(x, attn.k)), split(lin(x, attn.v))
    scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(d)
    scores -= scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    probs = e / e.sum(axis=-1, keepdims=True)
    ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(b, n, c)
    return lin(ctx, attn.out)


def test_attention_r1_equals_dense_mha_oracle():
    rng = SplitMix64(1)
    attn = EfficientSelfAttention(8, 2, 1, rng).astype(np.float64)
    x = _tokens(rng, 1, 64, 8)
    got = attn(x).data
    want = _dense_mha_oracle(x.data, attn)
    assert np.abs(got - want).max() < 1e-6


def test_attention_r1_has_no_reduction_parameters():
    attn = EfficientSelfAttention(8, 2, 1, SplitMix64(0))
    names = [n for n, _ in attn.named_parameters()]
    assert not any("reduce" in n for n in names)


def test_attention_output_shape_and_kv_length():
    rng = SplitMix64(2)
    attn = EfficientSelfAttention(8, 2, 4, rng)
    x = Tensor(rng.uniform_array((1, 64, 8), -1.0, 1.0).astype(np.float32))
    assert attn(x).shape == (1, 64, 8)
    assert attn.kv_length(64) == 16


def test_attention_rows_sum_to_one_per_head():
    rng = SplitMix64(3)
    for reduction in (1, 4):
        attn = EfficientSelfAttention(8, 2, reduction, rng).astype(np.float64)
        x = _tokens(rng, 2, 32, 8)
        probs = attn.attention_probs(x)
        assert probs.shape == (2, 2, 32, 32 // reduction)
        assert np.abs(probs.sum(axis=-1) - 1.0).max() < 1e-6


def test_doubling_reduction_halves_kv_keeps_output_shape():
    rng = SplitMix64(4)
    x32 = Tensor(rng.uniform_array((1, 32, 8), -1.0, 1.0).astype(np.float32))
    shapes = set()
    lengths = []
    for r in (1, 2, 4, 8):
        attn = EfficientSelfAttention(8, 2, r, SplitMix64(5))
        shapes.add(attn(x32).shape)
        lengths.append(attn.kv_length(32))
    assert shapes == {(1, 32, 8)}
    assert lengths == [32, 16, 8, 4]


def test_attention_ragged_length_zero_pads_tail_group():
    # N=10, R=4: two full groups plus one group of (2 real, 2 zero) tokens.
    rng = SplitMix64(6)
    attn = EfficientSelfAttention(4, 1, 4, rng).astype(np.float64)
    x = _tokens(rng, 1, 10, 4)
    reduced = attn._reduced(x)
    assert reduced.shape == (1, 3, 4)
    padded = np.concatenate([x.data, np.zeros((1, 2, 4))], axis=1)
    grouped = padded.reshape(1, 3, 16)
    pre = grouped @ attn.reduce.weight.data + attn.reduce.bias.data
    mu = pre.mean(axis=-1, keepdims=True)
    var = ((pre - mu) ** 2).mean(axis=-1, keepdims=True)
    want = ((pre - mu) / np.sqrt(var + 1e-6)) * attn.reduce_norm.gamma.data \
        + attn.reduce_norm.beta.data
    assert np.allclose(reduced.data, want, atol=1e-12)
    assert attn.kv_length(10) == 3


def test_attention_permutation_equivariance_at_r1():
    rng = SplitMix64(7)
    attn = EfficientSelfAttention(8, 2, 1, rng).astype(np.float64)
    x = _tokens(rng, 1, 40, 8)
    base = attn(x).data
    perm = np.array(SplitMix64(8).choose(40, 40))
    permuted_out = attn(Tensor(x.data[:, perm], dtype=np.float64)).data
    restored = np.empty_like(permuted_out)
    restored[:, perm] = permuted_out
    assert np.abs(restored - base).max() < 1e-5


def test_attention_chunked_inference_path_matches_dense():
    import amber.encoder as enc

    rng = SplitMix64(9)
    attn = EfficientSelfAttention(8, 2, 1, rng).astype(np.float64)
    x = _tokens(rng, 1, 48, 8)
    with no_grad():
        dense = attn(x).data
    saved = enc._SCORE_BLOCK_ELEMENTS
    enc._SCORE_BLOCK_ELEMENTS = 64  # force the blocked path
    try:
        with no_grad():
            chunked = attn(x).data
    finally:
        enc._SCORE_BLOCK_ELEMENTS = saved
    assert np.abs(chunked - dense).max() < 1e-12


# --- mix-ffn ---------------------------------------------------------------------

def test_mix_ffn_shapes_and_hidden_width():
    rng = SplitMix64(10)
    ffn = MixFFN(8, 4, rng)
    assert ffn.hidden == 32
    assert ffn.fc1.weight.shape == (8, 32)
    assert ffn.conv.weight.shape == (32, 1, 3, 3, 3)  # depthwise
    x = Tensor(rng.uniform_array((1, 64, 8), -1.0, 1.0).astype(np.float32))
    assert ffn(x, (4, 4, 4)).shape == (1, 64, 8)


def test_mix_ffn_zero_final_weights_is_identity_bitwise():
    rng = SplitMix64(11)
    ffn = MixFFN(4, 2, rng)
    ffn.fc2.weight.data[:] = 0.0
    ffn.fc2.bias.data[:] = 0.0
    x = Tensor(SplitMix64(12).uniform_array((1, 8, 4), -1.0, 1.0).astype(np.float32))
    out = ffn(x, (2, 2, 2))
    assert np.array_equal(out.data, x.data)


def test_mix_ffn_gradcheck_small_grid():
    rng = SplitMix64(13)
    ffn = MixFFN(4, 2, rng).astype(np.float64)
    x = Tensor(rng.uniform_array((1, 8, 4), -1.0, 1.0), requires_grad=True,
               dtype=np.float64)
    probe = rng.uniform_array((1, 8, 4), -1.0, 1.0)

    def fn(ts):
        return (ffn(ts[0], (2, 2, 2)) * Tensor(probe, dtype=np.float64)).sum()

    err = check_gradients(fn, [x] + ffn.parameters())
    assert err < 1e-3


# --- blocks and stages ----------------------------------------------------------

def test_transformer_block_preserves_token_count():
    rng = SplitMix64(14)
    block = TransformerBlock(8, 2, 4, 2, rng)
    x = Tensor(rng.uniform_array((2, 16, 8), -1.0, 1.0).astype(np.float32))
    assert block(x, (2, 2, 4)).shape == (2, 16, 8)


def test_stage_stride_one_preserves_extents():
    rng = SplitMix64(15)
    cfg = StageConfig(channels=8, num_blocks=1, num_heads=1, reduction=4,
                      stride=(1, 1, 1))
    stage = EncoderStage(1, cfg, 2, rng)
    x = Tensor(rng.uniform_array((1, 1, 4, 4, 4), -1.0, 1.0).astype(np.float32))
    grid, extents = stage(x)
    assert extents == (4, 4, 4)
    assert grid.shape == (1, 8, 4, 4, 4)


def test_stage_stride_two_halves_extents():
    rng = SplitMix64(16)
    cfg = StageConfig(channels=8, num_blocks=1, num_heads=1, reduction=2,
                      stride=(2, 2, 2))
    stage = EncoderStage(1, cfg, 2, rng)
    x = Tensor(rng.uniform_array((1, 1, 8, 8, 8), -1.0, 1.0).astype(np.float32))
    grid, extents = stage(x)
    assert extents == (4, 4, 4)
    assert grid.shape == (1, 8, 4, 4, 4)


def test_merge_shape_examples():
    # K=3 S=1 P=1 keeps extents; K=3 S=2 P=1 exactly halves even extents.
    cfg = ModelConfig(n_classes=2, schedule="preserving")
    ext = stage_extents(cfg, (16, 32, 32))
    assert ext == [(16, 32, 32), (8, 16, 16), (4, 8, 8), (2, 4, 4)]
    classic = ModelConfig(n_classes=2, schedule="classic")
    assert stage_extents(classic, (16, 32, 32))[0] == (8, 16, 16)


def test_merge_accepts_full_scene_leading_extents():
    cfg = ModelConfig(n_classes=16, schedule="preserving")
    ext = stage_extents(cfg, (204, 512, 217))
    assert ext[0] == (204, 512, 217)
    assert ext[1] == (102, 256, 109)  # ceil halving on odd extents


def test_encoder_pyramid_channels_and_extents():
    rng = SplitMix64(17)
    stages = [
        StageConfig(4, 1, 1, 8, stride=(1, 1, 1)),
        StageConfig(8, 1, 1, 4, stride=(2, 2, 2)),
        StageConfig(12, 1, 1, 2, stride=(2, 2, 2)),
        StageConfig(16, 1, 1, 1, stride=(2, 2, 2)),
    ]
    enc = Encoder(stages, expansion=2, rng=rng)
    x = Tensor(rng.uniform_array((1, 1, 8, 8, 8), -1.0, 1.0).astype(np.float32))
    with no_grad():
        pyr = enc(x)
    assert [f.shape[1] for f in pyr.features] == [4, 8, 12, 16]
    assert pyr.extents == [(8, 8, 8), (4, 4, 4), (2, 2, 2), (1, 1, 1)]


def test_encoder_rejects_multichannel_input():
    rng = SplitMix64(18)
    stages = [
        StageConfig(4, 1, 1, 1, stride=(1, 1, 1)),
        StageConfig(8, 1, 1, 1, stride=(2, 2, 2)),
        StageConfig(12, 1, 1, 1, stride=(2, 2, 2)),
        StageConfig(16, 1, 1, 1, stride=(2, 2, 2)),
    ]
    enc = Encoder(stages, expansion=2, rng=rng)
    with pytest.raises(ValueError):
        enc(Tensor(np.zeros((1, 2, 8, 8, 8), dtype=np.float32)))


def test_encoder_requires_increasing_channels():
    mk = lambda c: StageConfig(c, 1, 1, 1)
    with pytest.raises(ValueError):
        Encoder([mk(8), mk(8), mk(12), mk(16)], expansion=2, rng=SplitMix64(0))


def test_feature_pyramid_validates_monotonicity():
    f = lambda c, e: Tensor(np.zeros((1, c) + e, dtype=np.float32))
    with pytest.raises(ValueError):
        FeaturePyramid([f(8, (4, 4, 4)), f(4, (2, 2, 2))], [(4, 4, 4), (2, 2, 2)])
    with pytest.raises(ValueError):
        FeaturePyramid([f(4, (2, 2, 2)), f(8, (4, 4, 4))], [(2, 2, 2), (4, 4, 4)])
