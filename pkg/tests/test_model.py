"""Descriptor network: stem and reduction against conv oracles, block
structure (residual on query self-attention, no shortcut in cross
attention), descriptor invariants, caching, attention export, checkpoints."""

import numpy as np
import pytest

from boq.attention import COUNTER
from boq.errors import ConfigError, ContractError, DimensionError
from boq.model import (
    BoQBlockParams,
    ModelConfig,
    ReductionParams,
    StemParams,
    boq_block_forward,
    export_attention,
    feature_stem,
    init_model_params,
    load_checkpoint,
    model_forward,
    model_forward_batch,
    precompute_query_context,
    reduce_channels,
    refine_queries,
    save_checkpoint,
)
from boq.tensor import (
    Tape,
    Tensor,
    backward,
    finite_difference_check,
    mean,
    mul,
    tensor_sum,
)

from test_attention import scalar_loop_attention


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def tiny_feature_config(**kw) -> ModelConfig:
    base = dict(
        num_blocks=2,
        queries_per_block=2,
        model_dim=8,
        num_heads=2,
        channel_proj=4,
        row_proj=2,
        input_mode="features",
        feature_dim=8,
    )
    base.update(kw)
    return ModelConfig(**base)


# ---------------------------------------------------------------------------
# feature stem
# ---------------------------------------------------------------------------


def test_stem_token_count_64x64(rng):
    stem = StemParams.create((4, 8, 16), rng)
    tokens, grid = feature_stem(Tensor(rng.uniform(size=(3, 64, 64))), stem)
    assert grid == (8, 8)
    assert tokens.shape == (64, 16)


def test_stem_zero_image_zero_biases_gives_zero_tokens(rng):
    stem = StemParams.create((4, 8, 16), rng)
    tokens, _ = feature_stem(Tensor(np.zeros((3, 16, 16))), stem)
    assert np.array_equal(tokens.data, np.zeros((4, 16)))


def test_stem_rejects_indivisible_dims(rng):
    stem = StemParams.create((4, 8, 16), rng)
    with pytest.raises(DimensionError):
        feature_stem(Tensor(np.zeros((3, 60, 64))), stem)


def test_stem_token_order_is_row_major(rng):
    # Token k must correspond to grid cell (k // W', k % W').
    stem = StemParams.create((2, 3, 5), rng)
    img = Tensor(rng.uniform(size=(3, 16, 16)))
    tokens, (gh, gw) = feature_stem(img, stem)
    from boq.tensor import conv2d, relu

    x = img
    for w, b in zip(stem.weights, stem.biases):
        x = relu(conv2d(x, w, b, stride=2, padding=1))
    for k in [0, 1, gw, gh * gw - 1]:
        assert np.array_equal(tokens.data[k], x.data[:, k // gw, k % gw])


def test_stem_gradient_check(rng):
    stem = StemParams.create((2, 2, 3), rng)
    img = Tensor(rng.uniform(size=(3, 8, 8)))
    for w in stem.weights:
        err = finite_difference_check(
            lambda t, w=w: mean(feature_stem(img, stem)[0]), w
        )
        assert err < 1e-4


# ---------------------------------------------------------------------------
# channel reduction
# ---------------------------------------------------------------------------


def test_reduce_identity_kernel_is_identity(rng):
    d = 4
    weight = np.zeros((d, d, 3, 3))
    for c in range(d):
        weight[c, c, 1, 1] = 1.0
    params = ReductionParams("grid", Tensor(weight, requires_grad=True), Tensor(np.zeros(d), requires_grad=True))
    feats = rng.normal(size=(6, d))
    out = reduce_channels(Tensor(feats), params, grid_shape=(2, 3))
    assert np.max(np.abs(out.data - feats)) < 1e-14


def test_reduce_one_by_one_grid_is_center_tap(rng):
    d0, d = 3, 5
    params = ReductionParams.create("grid", d0, d, rng)
    feats = rng.normal(size=(1, d0))
    out = reduce_channels(Tensor(feats), params, grid_shape=(1, 1))
    want = feats[0] @ params.weight.data[:, :, 1, 1].T + params.bias.data
    assert np.max(np.abs(out.data[0] - want)) < 1e-13


def test_reduce_grid_matches_sliding_window_oracle(rng):
    from test_tensor import sliding_window_conv

    d0, d, gh, gw = 3, 4, 5, 4
    params = ReductionParams.create("grid", d0, d, rng)
    feats = rng.normal(size=(gh * gw, d0))
    out = reduce_channels(Tensor(feats), params, grid_shape=(gh, gw))
    grid = feats.reshape(gh, gw, d0).transpose(2, 0, 1)
    want = sliding_window_conv(grid, params.weight.data, params.bias.data, 1, 1)
    want_tokens = want.transpose(1, 2, 0).reshape(gh * gw, d)
    assert np.max(np.abs(out.data - want_tokens)) < 1e-12


def test_reduce_grid_mode_requires_grid_shape(rng):
    params = ReductionParams.create("grid", 3, 4, rng)
    with pytest.raises(ConfigError):
        reduce_channels(Tensor(np.zeros((4, 3))), params)


def test_reduce_token_mode_is_linear_map(rng):
    params = ReductionParams.create("tokens", 3, 4, rng)
    feats = rng.normal(size=(5, 3))
    out = reduce_channels(Tensor(feats), params)
    assert np.max(np.abs(out.data - (feats @ params.weight.data + params.bias.data))) < 1e-14


# ---------------------------------------------------------------------------
# aggregation block
# ---------------------------------------------------------------------------


def test_block_no_query_shortcut_structural(rng):
    # Zeroing the cross-attention value and output projections must force
    # the block output to zero for arbitrary queries and tokens: nothing
    # flows from the queries except through attention onto the values.
    block = BoQBlockParams.create(4, 8, 2, rng)
    block.cross_attn.w_v.data[...] = 0.0
    block.cross_attn.b_v.data[...] = 0.0
    block.cross_attn.w_o.data[...] = 0.0
    block.cross_attn.b_o.data[...] = 0.0
    for _ in range(5):
        q = Tensor(rng.normal(size=(4, 8)) * 10)
        x = Tensor(rng.normal(size=(6, 8)) * 10)
        out, _ = boq_block_forward(q, x, block)
        assert np.array_equal(out.data, np.zeros((4, 8)))


def test_block_self_attention_residual_structural(rng):
    # Zeroing only the self-attention output projection must leave the
    # refined queries exactly equal to the raw bag (the residual path).
    block = BoQBlockParams.create(3, 8, 2, rng)
    block.self_attn.w_o.data[...] = 0.0
    block.self_attn.b_o.data[...] = 0.0
    refined = refine_queries(block, use_self_attention=True)
    assert np.array_equal(refined.data, block.queries.data)


def test_block_single_token_identity(rng):
    from test_attention import identity_mha

    block = BoQBlockParams(
        queries=Tensor(rng.normal(size=(1, 4)), requires_grad=True),
        self_attn=identity_mha(4),
        cross_attn=identity_mha(4),
        norm_gain=Tensor(np.ones(4), requires_grad=True),
        norm_bias=Tensor(np.zeros(4), requires_grad=True),
    )
    x = Tensor(rng.normal(size=(1, 4)))
    out, _ = boq_block_forward(block.queries, x, block)
    assert np.max(np.abs(out.data - x.data)) < 1e-14


def test_block_matches_composed_attention_oracles(rng):
    block = BoQBlockParams.create(3, 8, 2, rng)
    x = rng.normal(size=(5, 8))
    out, weights = boq_block_forward(block.queries, Tensor(x), block)
    q_sa, _ = scalar_loop_attention(
        block.queries.data, block.queries.data, block.queries.data, block.self_attn
    )
    q_ref = q_sa + block.queries.data
    want, want_w = scalar_loop_attention(q_ref, x, x, block.cross_attn)
    assert np.max(np.abs(out.data - want)) < 1e-10
    assert np.max(np.abs(weights.data - want_w)) < 1e-10


def test_block_rejects_empty_tokens(rng):
    block = BoQBlockParams.create(2, 8, 2, rng)
    from boq.errors import EmptyInputError

    with pytest.raises(EmptyInputError):
        boq_block_forward(block.queries, Tensor(np.zeros((0, 8))), block)


# ---------------------------------------------------------------------------
# full forward
# ---------------------------------------------------------------------------


def test_descriptor_unit_norm_image_mode(rng):
    cfg = ModelConfig(stem_channels=(4, 8, 16), model_dim=16, num_heads=2,
                      channel_proj=8, row_proj=4, queries_per_block=4)
    params = init_model_params(cfg, rng)
    for _ in range(5):
        d = model_forward(Tensor(rng.uniform(size=(3, 32, 32))), params)
        assert abs(np.linalg.norm(d.data) - 1.0) < 1e-6
        assert d.shape == (cfg.descriptor_dim,)


def test_descriptor_token_permutation_invariance(rng):
    cfg = tiny_feature_config()
    params = init_model_params(cfg, rng)
    x = rng.normal(size=(12, 8))
    base = model_forward(Tensor(x), params).data
    for _ in range(10):
        perm = rng.permutation(12)
        out = model_forward(Tensor(x[perm]), params).data
        assert np.max(np.abs(out - base)) < 1e-8


@pytest.mark.parametrize(
    "blocks,queries,c,r",
    [
        (2, 16, 64, 8),    # desk default: D=512
        (1, 4, 16, 4),     # D=64
        (3, 8, 32, 6),     # D=192
        (2, 64, 128, 32),  # large table configuration: D=4096
        (4, 32, 96, 16),   # D=1536
    ],
)
def test_descriptor_dim_is_channel_times_row(rng, blocks, queries, c, r):
    cfg = tiny_feature_config(
        num_blocks=blocks, queries_per_block=queries, channel_proj=c, row_proj=r
    )
    params = init_model_params(cfg, rng)
    d = model_forward(Tensor(rng.normal(size=(6, 8))), params)
    assert d.shape == (c * r,)
    assert cfg.descriptor_dim == c * r


def test_batched_forward_matches_single(rng):
    cfg = ModelConfig(stem_channels=(4, 8, 16), model_dim=16, num_heads=2,
                      channel_proj=8, row_proj=4, queries_per_block=4)
    params = init_model_params(cfg, rng)
    imgs = rng.uniform(size=(3, 3, 32, 32))
    batched = model_forward_batch(Tensor(imgs), params).data
    for i in range(3):
        single = model_forward(Tensor(imgs[i]), params).data
        assert np.max(np.abs(batched[i] - single)) < 1e-12


def test_queries_are_input_independent(rng):
    cfg = tiny_feature_config()
    params = init_model_params(cfg, rng)
    before = [blk.queries.data.copy() for blk in params.blocks]
    for _ in range(3):
        model_forward(Tensor(rng.normal(size=(5, 8))), params)
    for blk, snap in zip(params.blocks, before):
        assert np.array_equal(blk.queries.data, snap)


def test_no_dead_parameters(rng):
    cfg = ModelConfig(stem_channels=(2, 3, 4), model_dim=8, num_heads=2,
                      channel_proj=4, row_proj=2, queries_per_block=2)
    params = init_model_params(cfg, rng)
    probe = Tensor(rng.normal(size=(cfg.descriptor_dim,)))
    params.training = True
    with Tape() as tape:
        d = model_forward(Tensor(rng.uniform(size=(3, 16, 16))), params)
        loss = tensor_sum(mul(d, probe))
    backward(loss, tape)
    for name, t in params.named_parameters().items():
        assert t.grad is not None, name
        assert np.linalg.norm(t.grad) > 0, name


# ---------------------------------------------------------------------------
# query-context caching
# ---------------------------------------------------------------------------


def test_cache_equivalence_and_op_counts(rng):
    cfg = tiny_feature_config()
    params = init_model_params(cfg, rng)
    x = Tensor(rng.normal(size=(7, 8)))

    COUNTER.reset()
    plain = model_forward(Tensor(x.data), params)
    uncached_self = COUNTER.get("self_attention")

    cache = precompute_query_context(params)
    COUNTER.reset()
    cached = model_forward(Tensor(x.data), params, cache=cache)
    cached_self = COUNTER.get("self_attention")

    assert np.max(np.abs(plain.data - cached.data)) < 1e-12
    assert uncached_self - cached_self == cfg.num_blocks


def test_cache_is_invalidated_by_parameter_updates(rng):
    cfg = tiny_feature_config()
    params = init_model_params(cfg, rng)
    cache = precompute_query_context(params)
    params.version += 1  # what the optimizer does after a step
    with pytest.raises(ContractError, match="stale"):
        model_forward(Tensor(rng.normal(size=(5, 8))), params, cache=cache)


def test_cache_refused_during_training(rng):
    cfg = tiny_feature_config()
    params = init_model_params(cfg, rng)
    params.training = True
    with pytest.raises(ContractError):
        precompute_query_context(params)


# ---------------------------------------------------------------------------
# attention export
# ---------------------------------------------------------------------------


def test_export_grids_sum_to_one(rng):
    cfg = ModelConfig(stem_channels=(2, 3, 4), model_dim=8, num_heads=2,
                      channel_proj=4, row_proj=2, queries_per_block=4)
    params = init_model_params(cfg, rng)
    img = Tensor(rng.uniform(size=(3, 32, 32)))
    grids = export_attention(img, params, block_index=1, query_indices=[0, 2, 3])
    assert len(grids) == 3
    for g in grids:
        assert g.shape == (4, 4)
        assert abs(g.sum() - 1.0) < 1e-6


def test_export_uniform_input_near_uniform_grid(rng):
    # A zero image makes every stem token zero (padding included), and the
    # channel reduction of zero input is exactly its bias at every grid
    # cell. All tokens being identical, attention cannot prefer any cell.
    cfg = ModelConfig(stem_channels=(2, 3, 4), model_dim=8, num_heads=2,
                      channel_proj=4, row_proj=2, queries_per_block=2)
    params = init_model_params(cfg, rng)
    params.reduction.bias.data[...] = rng.normal(size=8)
    img = Tensor(np.zeros((3, 32, 32)))
    (grid,) = export_attention(img, params, block_index=0, query_indices=[0])
    assert np.max(np.abs(grid - 1.0 / grid.size)) < 1e-12


def test_export_matches_internal_attention_tensor(rng):
    cfg = ModelConfig(stem_channels=(2, 3, 4), model_dim=8, num_heads=2,
                      channel_proj=4, row_proj=2, queries_per_block=3)
    params = init_model_params(cfg, rng)
    img = Tensor(rng.uniform(size=(3, 24, 24)))
    from boq.model import _forward_internal

    _, maps, (gh, gw) = _forward_internal(img, params, cfg, None)
    grids = export_attention(img, params, block_index=0, query_indices=[1])
    want = maps[0].data.mean(axis=0)[1].reshape(gh, gw)
    assert np.array_equal(grids[0], want)


def test_export_requires_grid_input(rng):
    cfg = tiny_feature_config()
    params = init_model_params(cfg, rng)
    with pytest.raises(ConfigError):
        export_attention(Tensor(rng.normal(size=(5, 8))), params, block_index=0)


def test_export_validates_block_index(rng):
    cfg = ModelConfig(stem_channels=(2, 3, 4), model_dim=8, num_heads=2,
                      channel_proj=4, row_proj=2)
    params = init_model_params(cfg, rng)
    with pytest.raises(ConfigError):
        export_attention(Tensor(np.zeros((3, 16, 16))), params, block_index=5)


# ---------------------------------------------------------------------------
# end-to-end gradient check (tiny config)
# ---------------------------------------------------------------------------


def test_model_gradients_pass_finite_differences(rng):
    cfg = tiny_feature_config()
    params = init_model_params(cfg, rng)
    x = Tensor(rng.normal(size=(4, 8)))
    probe = Tensor(rng.normal(size=(cfg.descriptor_dim,)))

    def loss_fn(_t):
        return tensor_sum(mul(model_forward(x, params, cfg), probe))

    params.training = True
    for name in ("block0.queries", "encoder0.mha.w_q", "feature_proj", "token_proj"):
        t = params.named_parameters()[name]
        assert finite_difference_check(loss_fn, t) < 1e-4, name


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_round_trip_bit_exact(rng, tmp_path):
    cfg = ModelConfig(stem_channels=(2, 3, 4), model_dim=8, num_heads=2,
                      channel_proj=4, row_proj=2, queries_per_block=3)
    params = init_model_params(cfg, rng)
    path = tmp_path / "model.boqt"
    save_checkpoint(path, params)
    loaded = load_checkpoint(path)
    assert loaded.config == cfg
    for name, t in params.named_parameters().items():
        assert np.array_equal(t.data, loaded.named_parameters()[name].data), name
    # Same input, same descriptor, bitwise.
    img = Tensor(rng.uniform(size=(3, 16, 16)))
    a = model_forward(Tensor(img.data), params).data
    b = model_forward(Tensor(img.data), loaded).data
    assert np.array_equal(a, b)
    # Writing the loaded params again reproduces the file byte for byte.
    path2 = tmp_path / "model2.boqt"
    save_checkpoint(path2, loaded)
    assert path.read_bytes() == path2.read_bytes()