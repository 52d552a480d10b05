"""Multi-head attention and the transformer encoder unit.

The attention scale is the per-head dimension sqrt(d/h); with a single head
this reduces to the plain sqrt(d) scaled dot product. No attention masking,
no dropout, and no positional encoding anywhere: the encoder is exactly
permutation-equivariant in its token axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, EmptyInputError
from .tensor import (
    Tensor,
    add,
    layer_norm,
    matmul,
    mul,
    relu,
    reshape,
    softmax,
    transpose,
)


class OpCounter:
    """Counts attention evaluations so caching savings can be measured."""

    def __init__(self):
        self.counts: dict[str, int] = {}

    def add(self, key: str, n: int = 1) -> None:
        self.counts[key] = self.counts.get(key, 0) + n

    def get(self, key: str) -> int:
        return self.counts.get(key, 0)

    def reset(self) -> None:
        self.counts.clear()

    def snapshot(self) -> dict[str, int]:
        return dict(self.counts)


COUNTER = OpCounter()


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> Tensor:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones_param(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


@dataclass
class MHAParams:
    """Projection weights for one multi-head attention operator."""

    num_heads: int
    model_dim: int
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    # No key bias: a shared offset on every key shifts each softmax row
    # uniformly and cancels exactly, so it would be a dead parameter.
    b_q: Tensor
    b_v: Tensor
    b_o: Tensor

    def __post_init__(self):
        if self.num_heads < 1:
            raise DimensionError(f"num_heads must be positive, got {self.num_heads}")
        if self.model_dim % self.num_heads:
            raise DimensionError(
                f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}"
            )
        for name in ("w_q", "w_k", "w_v", "w_o"):
            w = getattr(self, name)
            if w.shape != (self.model_dim, self.model_dim):
                raise DimensionError(
                    f"{name} shape {w.shape} != ({self.model_dim}, {self.model_dim})"
                )

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads

    @classmethod
    def create(cls, model_dim: int, num_heads: int, rng: np.random.Generator) -> "MHAParams":
        d = model_dim
        mk = lambda: glorot_uniform(rng, d, d, (d, d))
        return cls(
            num_heads=num_heads,
            model_dim=d,
            w_q=mk(),
            w_k=mk(),
            w_v=mk(),
            w_o=mk(),
            b_q=zeros_param(d),
            b_v=zeros_param(d),
            b_o=zeros_param(d),
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        names = ("w_q", "w_k", "w_v", "w_o", "b_q", "b_v", "b_o")
        return {f"{prefix}.{n}": getattr(self, n) for n in names}


def _split_heads(x: Tensor, h: int, dh: int) -> Tensor:
    # [*lead, n, d] -> [*lead, h, n, dh]
    *lead, n, _ = x.shape
    folded = reshape(x, (*lead, n, h, dh))
    axes = (*range(len(lead)), len(lead) + 1, len(lead), len(lead) + 2)
    return transpose(folded, axes)


def _merge_heads(x: Tensor, d: int) -> Tensor:
    # [*lead, h, n, dh] -> [*lead, n, d]
    *lead, h, n, dh = x.shape
    axes = (*range(len(lead)), len(lead) + 1, len(lead), len(lead) + 2)
    return reshape(transpose(x, axes), (*lead, n, d))


def multi_head_attention(
    q_in: Tensor, k_in: Tensor, v_in: Tensor, p: MHAParams
) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention over ``p.num_heads`` parallel heads.

    q_in: [m, d]; k_in, v_in: [n, d]. Returns the attended output [m, d]
    together with the per-head attention weights [h, m, n] (softmax rows,
    useful for visualization; they live on the same tape as the output).
    All three inputs may carry identical extra leading batch dimensions,
    which the output and weights then share.
    """
    d = p.model_dim
    for name, t in (("q_in", q_in), ("k_in", k_in), ("v_in", v_in)):
        if t.ndim < 2 or t.shape[-1] != d:
            raise DimensionError(f"{name} shape {t.shape} incompatible with model_dim {d}")
    if q_in.shape[:-2] != k_in.shape[:-2] or k_in.shape[:-2] != v_in.shape[:-2]:
        raise DimensionError(
            f"leading dims differ: {q_in.shape} vs {k_in.shape} vs {v_in.shape}"
        )
    n = k_in.shape[-2]
    if k_in.shape[-2] != v_in.shape[-2]:
        raise DimensionError(
            f"key/value row counts differ: {k_in.shape} vs {v_in.shape}"
        )
    if n == 0:
        raise EmptyInputError("attention over an empty key/value set")

    h, dh = p.num_heads, p.head_dim
    q = _split_heads(add(matmul(q_in, p.w_q), p.b_q), h, dh)
    k = _split_heads(matmul(k_in, p.w_k), h, dh)
    v = _split_heads(add(matmul(v_in, p.w_v), p.b_v), h, dh)

    swap_last = (*range(k.ndim - 2), k.ndim - 1, k.ndim - 2)
    scores = mul(matmul(q, transpose(k, swap_last)), 1.0 / math.sqrt(dh))
    weights = softmax(scores, axis=-1)  # [*lead, h, m, n]
    context = matmul(weights, v)  # [*lead, h, m, dh]
    merged = _merge_heads(context, d)
    out = add(matmul(merged, p.w_o), p.b_o)
    return out, weights


@dataclass
class EncoderParams:
    """One post-norm transformer block: self-attention then feed-forward,
    each wrapped in a residual connection and layer norm."""

    mha: MHAParams
    w_ff1: Tensor
    b_ff1: Tensor
    w_ff2: Tensor
    b_ff2: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    ffn_mult: int = field(default=4)

    @classmethod
    def create(
        cls,
        model_dim: int,
        num_heads: int,
        rng: np.random.Generator,
        ffn_mult: int = 4,
    ) -> "EncoderParams":
        d, dff = model_dim, ffn_mult * model_dim
        return cls(
            mha=MHAParams.create(model_dim, num_heads, rng),
            w_ff1=glorot_uniform(rng, d, dff, (d, dff)),
            b_ff1=zeros_param(dff),
            w_ff2=glorot_uniform(rng, dff, d, (dff, d)),
            b_ff2=zeros_param(d),
            ln1_gain=ones_param(d),
            ln1_bias=zeros_param(d),
            ln2_gain=ones_param(d),
            ln2_bias=zeros_param(d),
            ffn_mult=ffn_mult,
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = self.mha.named(f"{prefix}.mha")
        for n in (
            "w_ff1",
            "b_ff1",
            "w_ff2",
            "b_ff2",
            "ln1_gain",
            "ln1_bias",
            "ln2_gain",
            "ln2_bias",
        ):
            out[f"{prefix}.{n}"] = getattr(self, n)
        return out


def encoder_forward(x: Tensor, p: EncoderParams) -> Tensor:
    """Refine a token sequence [n, d] -> [n, d] (shape preserved)."""
    COUNTER.add("self_attention")
    attended, _ = multi_head_attention(x, x, x, p.mha)
    y = layer_norm(add(x, attended), p.ln1_gain, p.ln1_bias)
    hidden = relu(add(matmul(y, p.w_ff1), p.b_ff1))
    ff = add(matmul(hidden, p.w_ff2), p.b_ff2)
    return layer_norm(add(y, ff), p.ln2_gain, p.ln2_bias)
