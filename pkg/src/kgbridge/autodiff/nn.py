"""Transformer building blocks on top of the tape tensors."""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Iterator

import numpy as np

from .tensor import Tensor, gelu, layer_norm, matmul, parameter, reshape, softmax, transpose


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float32) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


class _Weights:
    """Mixin: iterate the Tensor fields of a weight dataclass by name."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, Tensor):
                yield prefix + f.name, value
            elif isinstance(value, _Weights):
                yield from value.named_parameters(prefix + f.name + ".")


@dataclass
class AttentionWeights(_Weights):
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, zero_output: bool = True, dtype=np.float32):
        z = np.zeros(d, dtype=dtype)
        wo = np.zeros((d, d), dtype=dtype) if zero_output else xavier_uniform(rng, d, d, dtype)
        return cls(
            wq=parameter(xavier_uniform(rng, d, d, dtype)),
            bq=parameter(z),
            wk=parameter(xavier_uniform(rng, d, d, dtype)),
            bk=parameter(z),
            wv=parameter(xavier_uniform(rng, d, d, dtype)),
            bv=parameter(z),
            wo=parameter(wo),
            bo=parameter(z),
        )


@dataclass
class BlockWeights(_Weights):
    ln1_gain: Tensor
    ln1_bias: Tensor
    attn: AttentionWeights
    ln2_gain: Tensor
    ln2_bias: Tensor
    ff_w1: Tensor
    ff_b1: Tensor
    ff_w2: Tensor
    ff_b2: Tensor

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, ff_mult: int = 4, zero_output: bool = True, dtype=np.float32):
        hidden = ff_mult * d
        w2 = np.zeros((hidden, d), dtype=dtype) if zero_output else xavier_uniform(rng, hidden, d, dtype)
        return cls(
            ln1_gain=parameter(np.ones(d, dtype=dtype)),
            ln1_bias=parameter(np.zeros(d, dtype=dtype)),
            attn=AttentionWeights.init(d, rng, zero_output, dtype),
            ln2_gain=parameter(np.ones(d, dtype=dtype)),
            ln2_bias=parameter(np.zeros(d, dtype=dtype)),
            ff_w1=parameter(xavier_uniform(rng, d, hidden, dtype)),
            ff_b1=parameter(np.zeros(hidden, dtype=dtype)),
            ff_w2=parameter(w2),
            ff_b2=parameter(np.zeros(d, dtype=dtype)),
        )


def multi_head_attention(x: Tensor, heads: int, w: AttentionWeights) -> Tensor:
    """Unmasked scaled dot-product attention over the token axis.

    ``x`` has shape (..., L, d); batch dimensions are carried through.
    """
    *batch, length, d = x.shape
    if d % heads:
        raise ValueError(f"model width {d} is not divisible by {heads} heads")
    dh = d // heads

    def split(t: Tensor) -> Tensor:
        # (..., L, d) -> (..., heads, L, dh)
        t = reshape(t, (*batch, length, heads, dh))
        nb = len(batch)
        return transpose(t, (*range(nb), nb + 1, nb, nb + 2))

    q = split(matmul(x, w.wq) + w.bq)
    k = split(matmul(x, w.wk) + w.bk)
    v = split(matmul(x, w.wv) + w.bv)
    nb = len(batch)
    kt = transpose(k, (*range(nb + 1), nb + 2, nb + 1))
    scores = matmul(q, kt) * (1.0 / np.sqrt(dh))
    attn = softmax(scores, axis=-1)
    ctx = matmul(attn, v)
    ctx = transpose(ctx, (*range(nb), nb + 1, nb, nb + 2))
    ctx = reshape(ctx, (*batch, length, d))
    return matmul(ctx, w.wo) + w.bo


def transformer_block(x: Tensor, block: BlockWeights, heads: int) -> Tensor:
    h = layer_norm(x, block.ln1_gain, block.ln1_bias)
    x = x + multi_head_attention(h, heads, block.attn)
    h = layer_norm(x, block.ln2_gain, block.ln2_bias)
    h = gelu(matmul(h, block.ff_w1) + block.ff_b1)
    return x + (matmul(h, block.ff_w2) + block.ff_b2)


def transformer_encoder_forward(z: Tensor, layers: list[BlockWeights], heads: int) -> Tensor:
    """Stack of pre-norm blocks with no positional encoding and no mask."""
    for block in layers:
        z = transformer_block(z, block, heads)
    return z
