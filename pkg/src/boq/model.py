"""The full descriptor network: stem, channel reduction, encoder cascade,
learned-query aggregation blocks, projection, and L2 normalization.

Each aggregation block holds a bag of M learnable query vectors. The bag
first self-attends (with a residual connection, so the refined queries keep
their identity), then cross-attends into the encoded image tokens. The
cross-attention output deliberately has no additive path from the queries:
zeroing the value and output projections forces the block output to zero no
matter what the queries contain. Block outputs are concatenated, projected
twice (feature axis, then token axis), flattened row-major, and normalized
to the unit hypersphere.

Because nothing injects positional information, descriptors computed from
precomputed token inputs are invariant to token permutation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .attention import (
    COUNTER,
    EncoderParams,
    MHAParams,
    encoder_forward,
    glorot_uniform,
    multi_head_attention,
    ones_param,
    zeros_param,
)
from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    EmptyInputError,
    FormatError,
)
from .tensor import (
    Tensor,
    add,
    concat,
    conv2d,
    expand_batch,
    l2_normalize,
    l2_normalize_rows,
    layer_norm,
    matmul,
    relu,
    reshape,
    transpose,
)

INPUT_MODE_IMAGE = "image"
INPUT_MODE_FEATURES = "features"

STEM_STRIDE = 8  # three stride-2 convolutions


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    Defaults are the desk-scale configuration (descriptor dim 512); the
    large configuration (64 queries per block, channel_proj=128, row_proj=32,
    descriptor dim 4096) stays expressible for shape checks.
    """

    num_blocks: int = 2
    queries_per_block: int = 16
    model_dim: int = 64
    num_heads: int = 4
    channel_proj: int = 64
    row_proj: int = 8
    input_mode: str = INPUT_MODE_IMAGE
    stem_channels: tuple[int, int, int] = (8, 16, 32)
    feature_dim: int = 0  # token width for precomputed-feature inputs
    query_self_attention: bool = True
    concat_norm: bool = True

    @property
    def descriptor_dim(self) -> int:
        return self.channel_proj * self.row_proj

    def validate(self) -> None:
        if self.num_blocks < 1:
            raise ConfigError(f"num_blocks must be >= 1, got {self.num_blocks}")
        if self.queries_per_block < 1:
            raise ConfigError(
                f"queries_per_block must be >= 1, got {self.queries_per_block}"
            )
        if self.model_dim < 1 or self.model_dim % self.num_heads:
            raise ConfigError(
                f"model_dim {self.model_dim} must be positive and divisible by "
                f"num_heads {self.num_heads}"
            )
        if self.channel_proj < 1 or self.row_proj < 1:
            raise ConfigError("projection dims must be positive")
        if self.input_mode not in (INPUT_MODE_IMAGE, INPUT_MODE_FEATURES):
            raise ConfigError(f"unknown input_mode '{self.input_mode}'")
        if len(self.stem_channels) != 3 or any(c < 1 for c in self.stem_channels):
            raise ConfigError(f"stem_channels must be 3 positive ints, got {self.stem_channels}")
        if self.input_mode == INPUT_MODE_FEATURES and self.feature_dim < 1:
            raise ConfigError("feature_dim must be set for precomputed-feature input")


@dataclass
class StemParams:
    """Three stride-2 3x3 convolutions with relu; total stride 8."""

    weights: list[Tensor]
    biases: list[Tensor]

    @classmethod
    def create(cls, channels: Sequence[int], rng: np.random.Generator) -> "StemParams":
        dims = [3, *channels]
        weights, biases = [], []
        for cin, cout in zip(dims[:-1], dims[1:]):
            weights.append(glorot_uniform(rng, cin * 9, cout * 9, (cout, cin, 3, 3)))
            biases.append(zeros_param(cout))
        return cls(weights, biases)

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.conv{i}.w"] = w
            out[f"{prefix}.conv{i}.b"] = b
        return out


@dataclass
class ReductionParams:
    """Maps raw token width d0 to the working width d.

    Grid inputs go through a 3x3 convolution (stride 1, padding 1); token
    inputs go through a plain linear map.
    """

    mode: str  # "grid" or "tokens"
    weight: Tensor
    bias: Tensor

    @classmethod
    def create(
        cls, mode: str, d0: int, d: int, rng: np.random.Generator
    ) -> "ReductionParams":
        if mode == "grid":
            w = glorot_uniform(rng, d0 * 9, d * 9, (d, d0, 3, 3))
        elif mode == "tokens":
            w = glorot_uniform(rng, d0, d, (d0, d))
        else:
            raise ConfigError(f"unknown reduction mode '{mode}'")
        return cls(mode, w, zeros_param(d))

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w": self.weight, f"{prefix}.b": self.bias}


@dataclass
class BoQBlockParams:
    """One aggregation block: a learnable query bag plus its attention and
    output-norm parameters. The queries are model parameters, independent of
    the input."""

    queries: Tensor  # [M, d]
    self_attn: MHAParams
    cross_attn: MHAParams
    norm_gain: Tensor
    norm_bias: Tensor

    @classmethod
    def create(
        cls, num_queries: int, model_dim: int, num_heads: int, rng: np.random.Generator
    ) -> "BoQBlockParams":
        queries = Tensor(
            rng.normal(0.0, 0.02, size=(num_queries, model_dim)), requires_grad=True
        )
        return cls(
            queries=queries,
            self_attn=MHAParams.create(model_dim, num_heads, rng),
            cross_attn=MHAParams.create(model_dim, num_heads, rng),
            norm_gain=ones_param(model_dim),
            norm_bias=zeros_param(model_dim),
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.queries": self.queries}
        out.update(self.self_attn.named(f"{prefix}.self_attn"))
        out.update(self.cross_attn.named(f"{prefix}.cross_attn"))
        out[f"{prefix}.norm_gain"] = self.norm_gain
        out[f"{prefix}.norm_bias"] = self.norm_bias
        return out


@dataclass
class BoQModelParams:
    """All learnable state of the model, plus bookkeeping for caching.

    ``version`` increments on every optimizer update so that precomputed
    query contexts can detect staleness. ``training`` marks the phase:
    query-context caching is an evaluation-only feature.
    """

    config: ModelConfig
    stem: Optional[StemParams]
    reduction: ReductionParams
    encoders: list[EncoderParams]
    blocks: list[BoQBlockParams]
    feature_proj: Tensor  # [d, channel_proj]
    token_proj: Tensor  # [L*M, row_proj]
    version: int = 0
    training: bool = False

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        if self.stem is not None:
            out.update(self.stem.named("stem"))
        out.update(self.reduction.named("reduction"))
        for i, enc in enumerate(self.encoders):
            out.update(enc.named(f"encoder{i}"))
        for i, blk in enumerate(self.blocks):
            out.update(blk.named(f"block{i}"))
        out["feature_proj"] = self.feature_proj
        out["token_proj"] = self.token_proj
        return out

    def clone(self) -> "BoQModelParams":
        copied = init_model_params(self.config, np.random.default_rng(0))
        src = self.named_parameters()
        for name, t in copied.named_parameters().items():
            t.data[...] = src[name].data
        copied.version = self.version
        copied.training = self.training
        return copied


def init_model_params(cfg: ModelConfig, rng: np.random.Generator) -> BoQModelParams:
    """Build freshly initialized parameters for ``cfg``."""
    cfg.validate()
    d = cfg.model_dim
    if cfg.input_mode == INPUT_MODE_IMAGE:
        stem = StemParams.create(cfg.stem_channels, rng)
        reduction = ReductionParams.create("grid", cfg.stem_channels[-1], d, rng)
    else:
        stem = None
        reduction = ReductionParams.create("tokens", cfg.feature_dim, d, rng)
    encoders = [
        EncoderParams.create(d, cfg.num_heads, rng) for _ in range(cfg.num_blocks)
    ]
    blocks = [
        BoQBlockParams.create(cfg.queries_per_block, d, cfg.num_heads, rng)
        for _ in range(cfg.num_blocks)
    ]
    lm = cfg.num_blocks * cfg.queries_per_block
    return BoQModelParams(
        config=cfg,
        stem=stem,
        reduction=reduction,
        encoders=encoders,
        blocks=blocks,
        feature_proj=glorot_uniform(rng, d, cfg.channel_proj, (d, cfg.channel_proj)),
        token_proj=glorot_uniform(rng, lm, cfg.row_proj, (lm, cfg.row_proj)),
    )


# ---------------------------------------------------------------------------
# Forward pieces
# ---------------------------------------------------------------------------


def feature_stem(image: Tensor, stem: StemParams) -> tuple[Tensor, tuple[int, int]]:
    """Downsample a [3, H, W] image to a row-major token sequence.

    Returns ([N, d0], (H/8, W/8)) with N = (H/8)*(W/8). Token order is
    row-major over the output grid and is stable, so attention exports can
    be folded back into image space.
    """
    if image.ndim != 3 or image.shape[0] != 3:
        raise DimensionError(f"expected a [3, H, W] image, got {image.shape}")
    _, h, w = image.shape
    if h % STEM_STRIDE or w % STEM_STRIDE:
        raise DimensionError(
            f"spatial dims {h}x{w} must be divisible by the stem stride {STEM_STRIDE}"
        )
    x = image
    for conv_w, conv_b in zip(stem.weights, stem.biases):
        x = relu(conv2d(x, conv_w, conv_b, stride=2, padding=1))
    d0, gh, gw = x.shape
    tokens = reshape(transpose(x, (1, 2, 0)), (gh * gw, d0))
    return tokens, (gh, gw)


def reduce_channels(
    features: Tensor,
    params: ReductionParams,
    grid_shape: Optional[tuple[int, int]] = None,
) -> Tensor:
    """Project [N, d0] tokens to [N, d] working width.

    Grid mode applies a 3x3 convolution over the feature grid (grid_shape is
    required and must multiply out to N); token mode applies a linear map.
    """
    if features.ndim != 2:
        raise DimensionError(f"expected [N, d0] features, got {features.shape}")
    n, d0 = features.shape
    if params.mode == "grid":
        if grid_shape is None:
            raise ConfigError("grid-mode channel reduction requires the grid shape")
        gh, gw = grid_shape
        if gh * gw != n:
            raise DimensionError(f"grid {gh}x{gw} does not tile {n} tokens")
        if params.weight.shape[1] != d0:
            raise DimensionError(
                f"reduction expects d0={params.weight.shape[1]}, got {d0}"
            )
        grid = transpose(reshape(features, (gh, gw, d0)), (2, 0, 1))
        out = conv2d(grid, params.weight, params.bias, stride=1, padding=1)
        d = out.shape[0]
        return reshape(transpose(out, (1, 2, 0)), (n, d))
    if params.weight.shape[0] != d0:
        raise DimensionError(f"reduction expects d0={params.weight.shape[0]}, got {d0}")
    return add(matmul(features, params.weight), params.bias)


def refine_queries(
    block: BoQBlockParams,
    use_self_attention: bool = True,
    queries: Optional[Tensor] = None,
) -> Tensor:
    """Self-attend a query bag and add it back (residual)."""
    q = block.queries if queries is None else queries
    if not use_self_attention:
        return q
    COUNTER.add("self_attention")
    attended, _ = multi_head_attention(q, q, q, block.self_attn)
    return add(attended, q)


def boq_block_forward(
    queries: Tensor,
    x: Tensor,
    block: BoQBlockParams,
    refined_queries: Optional[Tensor] = None,
    use_self_attention: bool = True,
) -> tuple[Tensor, Tensor]:
    """Aggregate token features [N, d] through one query bag.

    The bag self-attends with a residual, then cross-attends into the
    tokens. The returned output is the raw cross-attention result [M, d]:
    there is no additive shortcut from the queries to it. Also returns the
    cross-attention weights [h, M, N].

    ``refined_queries`` short-circuits the self-attention stage with a
    precomputed result (evaluation-time caching).
    """
    if x.ndim != 2:
        raise DimensionError(f"expected [N, d] token features, got {x.shape}")
    if x.shape[0] == 0:
        raise EmptyInputError("aggregation over an empty token sequence")
    if refined_queries is None:
        q = refine_queries(block, use_self_attention, queries)
    else:
        q = refined_queries
    COUNTER.add("cross_attention")
    out, weights = multi_head_attention(q, x, x, block.cross_attn)
    return out, weights


@dataclass
class QueryCache:
    """Refined query bags precomputed once for frozen parameters."""

    refined: list[Tensor]
    version: int


def precompute_query_context(params: BoQModelParams) -> QueryCache:
    """Evaluate each block's query self-attention once for reuse.

    Only valid outside training (the queries change every optimizer step).
    The cache records the parameter version; using it after any further
    update is a contract error.
    """
    if params.training:
        raise ContractError("query context cannot be cached during training")
    refined = [
        refine_queries(blk, params.config.query_self_attention).detach()
        for blk in params.blocks
    ]
    return QueryCache(refined=refined, version=params.version)


def _prepare_tokens(
    input_tensor: Tensor, params: BoQModelParams, cfg: ModelConfig
) -> tuple[Tensor, Optional[tuple[int, int]]]:
    if cfg.input_mode == INPUT_MODE_IMAGE:
        tokens, grid = feature_stem(input_tensor, params.stem)
        return reduce_channels(tokens, params.reduction, grid), grid
    if input_tensor.ndim != 2:
        raise DimensionError(
            f"precomputed-feature input must be [N, d0], got {input_tensor.shape}"
        )
    return reduce_channels(input_tensor, params.reduction), None


def _forward_internal(
    input_tensor: Tensor,
    params: BoQModelParams,
    cfg: ModelConfig,
    cache: Optional[QueryCache],
) -> tuple[Tensor, list[Tensor], Optional[tuple[int, int]]]:
    if cache is not None:
        if params.training:
            raise ContractError("query cache is evaluation-only")
        if cache.version != params.version:
            raise ContractError(
                f"stale query cache: built at parameter version {cache.version}, "
                f"parameters now at {params.version}"
            )
    x, grid = _prepare_tokens(input_tensor, params, cfg)
    block_outputs: list[Tensor] = []
    attention_maps: list[Tensor] = []
    for i, (enc, blk) in enumerate(zip(params.encoders, params.blocks)):
        x = encoder_forward(x, enc)
        refined = cache.refined[i] if cache is not None else None
        out, weights = boq_block_forward(
            blk.queries,
            x,
            blk,
            refined_queries=refined,
            use_self_attention=cfg.query_self_attention,
        )
        if cfg.concat_norm:
            out = layer_norm(out, blk.norm_gain, blk.norm_bias)
        block_outputs.append(out)
        attention_maps.append(weights)

    merged = concat(block_outputs, axis=0)  # [L*M, d]
    projected = matmul(merged, params.feature_proj)  # [L*M, c]
    by_channel = transpose(projected)  # [c, L*M]
    compact = matmul(by_channel, params.token_proj)  # [c, r]
    flat = reshape(compact, (cfg.descriptor_dim,))
    return l2_normalize(flat), attention_maps, grid


def model_forward(
    input_tensor: Tensor,
    params: BoQModelParams,
    cfg: Optional[ModelConfig] = None,
    cache: Optional[QueryCache] = None,
) -> Tensor:
    """Compute the unit-norm global descriptor for one input.

    ``input_tensor`` is a [3, H, W] image or an [N, d0] token matrix,
    matching ``cfg.input_mode``. Returns a vector of length
    ``cfg.descriptor_dim`` with L2 norm 1.
    """
    cfg = cfg or params.config
    descriptor, _, _ = _forward_internal(input_tensor, params, cfg, cache)
    return descriptor


def model_forward_batch(
    input_tensor: Tensor,
    params: BoQModelParams,
    cfg: Optional[ModelConfig] = None,
    cache: Optional[QueryCache] = None,
) -> Tensor:
    """Descriptors for a whole batch at once: [B, ...] -> [B, D].

    Same math as ``model_forward`` per element, but with all heavy
    operations batched; the input-independent query refinement runs once
    for the whole batch instead of once per element.
    """
    cfg = cfg or params.config
    if cache is not None:
        if params.training:
            raise ContractError("query cache is evaluation-only")
        if cache.version != params.version:
            raise ContractError(
                f"stale query cache: built at parameter version {cache.version}, "
                f"parameters now at {params.version}"
            )
    if cfg.input_mode == INPUT_MODE_IMAGE:
        if input_tensor.ndim != 4 or input_tensor.shape[1] != 3:
            raise DimensionError(
                f"expected a [B, 3, H, W] image batch, got {input_tensor.shape}"
            )
        _, _, h, w = input_tensor.shape
        if h % STEM_STRIDE or w % STEM_STRIDE:
            raise DimensionError(
                f"spatial dims {h}x{w} must be divisible by the stem stride {STEM_STRIDE}"
            )
        x = input_tensor
        for conv_w, conv_b in zip(params.stem.weights, params.stem.biases):
            x = relu(conv2d(x, conv_w, conv_b, stride=2, padding=1))
        b, _, gh, gw = x.shape
        reduced = conv2d(x, params.reduction.weight, params.reduction.bias, 1, 1)
        d = reduced.shape[1]
        x = reshape(transpose(reduced, (0, 2, 3, 1)), (b, gh * gw, d))
    else:
        if input_tensor.ndim != 3:
            raise DimensionError(
                f"expected a [B, N, d0] feature batch, got {input_tensor.shape}"
            )
        b = input_tensor.shape[0]
        if params.reduction.weight.shape[0] != input_tensor.shape[-1]:
            raise DimensionError(
                f"reduction expects d0={params.reduction.weight.shape[0]}, "
                f"got {input_tensor.shape[-1]}"
            )
        x = add(matmul(input_tensor, params.reduction.weight), params.reduction.bias)

    block_outputs: list[Tensor] = []
    for i, (enc, blk) in enumerate(zip(params.encoders, params.blocks)):
        x = encoder_forward(x, enc)
        if cache is not None:
            refined = cache.refined[i]
        else:
            refined = refine_queries(blk, cfg.query_self_attention)
        COUNTER.add("cross_attention")
        out, _ = multi_head_attention(
            expand_batch(refined, b), x, x, blk.cross_attn
        )
        if cfg.concat_norm:
            out = layer_norm(out, blk.norm_gain, blk.norm_bias)
        block_outputs.append(out)

    merged = concat(block_outputs, axis=1)  # [B, L*M, d]
    projected = matmul(merged, params.feature_proj)  # [B, L*M, c]
    by_channel = transpose(projected, (0, 2, 1))  # [B, c, L*M]
    compact = matmul(by_channel, params.token_proj)  # [B, c, r]
    flat = reshape(compact, (b, cfg.descriptor_dim))
    return l2_normalize_rows(flat)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_CONFIG_ENTRY = "__config__"
_CONFIG_FORMAT = 1.0


def _encode_config(cfg: ModelConfig) -> np.ndarray:
    return np.array(
        [
            _CONFIG_FORMAT,
            cfg.num_blocks,
            cfg.queries_per_block,
            cfg.model_dim,
            cfg.num_heads,
            cfg.channel_proj,
            cfg.row_proj,
            0.0 if cfg.input_mode == INPUT_MODE_IMAGE else 1.0,
            *cfg.stem_channels,
            cfg.feature_dim,
            1.0 if cfg.query_self_attention else 0.0,
            1.0 if cfg.concat_norm else 0.0,
        ],
        dtype=np.float64,
    )


def _decode_config(vec: np.ndarray) -> ModelConfig:
    if vec.shape != (14,) or vec[0] != _CONFIG_FORMAT:
        raise FormatError(f"unrecognized checkpoint config header (shape {vec.shape})")
    return ModelConfig(
        num_blocks=int(vec[1]),
        queries_per_block=int(vec[2]),
        model_dim=int(vec[3]),
        num_heads=int(vec[4]),
        channel_proj=int(vec[5]),
        row_proj=int(vec[6]),
        input_mode=INPUT_MODE_IMAGE if vec[7] == 0.0 else INPUT_MODE_FEATURES,
        stem_channels=(int(vec[8]), int(vec[9]), int(vec[10])),
        feature_dim=int(vec[11]),
        query_self_attention=bool(vec[12]),
        concat_norm=bool(vec[13]),
    )


def save_checkpoint(path, params: BoQModelParams) -> None:
    """Write parameters plus their config header as one tensor container."""
    from .data import write_tensor_file

    named = params.named_parameters()
    entries: dict[str, np.ndarray] = {_CONFIG_ENTRY: _encode_config(params.config)}
    for name in sorted(named):
        entries[name] = named[name].data
    write_tensor_file(path, entries, dtype="f64")


def load_checkpoint(path) -> BoQModelParams:
    """Rebuild parameters from a checkpoint written by ``save_checkpoint``."""
    from .data import read_tensor_file

    entries, dtype = read_tensor_file(path)
    if dtype != "f64":
        raise FormatError(f"{path}: checkpoints must be f64, found {dtype}")
    if _CONFIG_ENTRY not in entries:
        raise FormatError(f"{path}: missing '{_CONFIG_ENTRY}' entry")
    cfg = _decode_config(entries[_CONFIG_ENTRY])
    params = init_model_params(cfg, np.random.default_rng(0))
    named = params.named_parameters()
    missing = sorted(set(named) - set(entries))
    extra = sorted(set(entries) - set(named) - {_CONFIG_ENTRY})
    if missing or extra:
        raise FormatError(
            f"{path}: parameter table mismatch (missing {missing}, unexpected {extra})"
        )
    for name, tensor in named.items():
        if entries[name].shape != tensor.data.shape:
            raise FormatError(
                f"{path}: entry '{name}' has shape {entries[name].shape}, "
                f"expected {tensor.data.shape}"
            )
        tensor.data[...] = entries[name]
    return params


def export_attention(
    input_tensor: Tensor,
    params: BoQModelParams,
    cfg: Optional[ModelConfig] = None,
    block_index: int = 0,
    query_indices: Sequence[int] = (0,),
) -> list[np.ndarray]:
    """Head-averaged cross-attention weights for selected queries, folded
    back onto the feature grid.

    Returns one [H', W'] array per requested query; each sums to 1 (they
    are softmax rows). Requires grid (image) input so that the token axis
    has a spatial layout.
    """
    cfg = cfg or params.config
    if cfg.input_mode != INPUT_MODE_IMAGE:
        raise ConfigError("attention export requires grid (image) input")
    if not 0 <= block_index < cfg.num_blocks:
        raise ConfigError(
            f"block_index {block_index} out of range for {cfg.num_blocks} blocks"
        )
    _, maps, grid = _forward_internal(input_tensor, params, cfg, None)
    gh, gw = grid
    weights = maps[block_index].data  # [h, M, N]
    averaged = weights.mean(axis=0)  # [M, N]
    grids = []
    for qi in query_indices:
        if not 0 <= qi < cfg.queries_per_block:
            raise ConfigError(
                f"query index {qi} out of range for {cfg.queries_per_block} queries"
            )
        grids.append(averaged[qi].reshape(gh, gw).copy())
    return grids
