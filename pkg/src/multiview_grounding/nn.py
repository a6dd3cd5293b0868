"""Shared transformer building blocks on top of the autodiff core.

All apply-functions are dimension-general: inputs may carry any number of
leading axes before (sequence, width), so the same code serves single
samples, batches, and per-view stacks. Masks are additive numpy constants
(0 keeps, -1e30 drops) broadcast against attention logits; gradients never
flow into them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, is_dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, parameter

MASKED_OUT = -1e30


@dataclass
class LinearParams:
    weight: Tensor
    bias: Tensor | None = None


@dataclass
class NormParams:
    gain: Tensor
    bias: Tensor


@dataclass
class AttentionParams:
    query: LinearParams
    key: LinearParams
    value: LinearParams
    out: LinearParams
    heads: int


@dataclass
class EncoderBlockParams:
    """Pre-norm self-attention + feed-forward block."""

    attn_norm: NormParams
    attn: AttentionParams
    ffn_norm: NormParams
    ffn_in: LinearParams
    ffn_out: LinearParams


@dataclass
class DecoderBlockParams:
    """Pre-norm self-attention, cross-attention, feed-forward block."""

    self_norm: NormParams
    self_attn: AttentionParams
    cross_norm: NormParams
    cross_attn: AttentionParams
    ffn_norm: NormParams
    ffn_in: LinearParams
    ffn_out: LinearParams


def init_linear(rng, d_in: int, d_out: int, bias: bool = True) -> LinearParams:
    bound = math.sqrt(6.0 / (d_in + d_out))
    weight = parameter(rng.uniform(-bound, bound, size=(d_in, d_out)))
    return LinearParams(weight=weight, bias=parameter(np.zeros(d_out)) if bias else None)


def init_norm(d: int) -> NormParams:
    return NormParams(gain=parameter(np.ones(d)), bias=parameter(np.zeros(d)))


def init_attention(rng, d: int, heads: int) -> AttentionParams:
    if d % heads:
        raise ValueError(f"width {d} is not divisible by {heads} heads")
    return AttentionParams(
        query=init_linear(rng, d, d),
        key=init_linear(rng, d, d),
        value=init_linear(rng, d, d),
        out=init_linear(rng, d, d),
        heads=heads,
    )


def init_encoder_block(rng, d: int, heads: int, ffn_mult: int = 4) -> EncoderBlockParams:
    return EncoderBlockParams(
        attn_norm=init_norm(d),
        attn=init_attention(rng, d, heads),
        ffn_norm=init_norm(d),
        ffn_in=init_linear(rng, d, ffn_mult * d),
        ffn_out=init_linear(rng, ffn_mult * d, d),
    )


def init_decoder_block(rng, d: int, heads: int, ffn_mult: int = 4) -> DecoderBlockParams:
    return DecoderBlockParams(
        self_norm=init_norm(d),
        self_attn=init_attention(rng, d, heads),
        cross_norm=init_norm(d),
        cross_attn=init_attention(rng, d, heads),
        ffn_norm=init_norm(d),
        ffn_in=init_linear(rng, d, ffn_mult * d),
        ffn_out=init_linear(rng, ffn_mult * d, d),
    )


def linear(x, p: LinearParams):
    if p.bias is not None:
        return ad.affine(x, p.weight, p.bias)
    return ad.matmul(x, p.weight)


def norm(x, p: NormParams):
    return ad.layer_norm(x, p.gain, p.bias)


def _split_heads(x, heads: int):
    *lead, length, width = x.shape
    x = ad.reshape(x, (*lead, length, heads, width // heads))
    return ad.swapaxes(x, -3, -2)


def _merge_heads(x):
    x = ad.swapaxes(x, -3, -2)
    *lead, length, heads, head_dim = x.shape
    return ad.reshape(x, (*lead, length, heads * head_dim))


def attention(queries_in, keys_in, p: AttentionParams, key_mask=None,
              dropout_p: float = 0.0, rng=None, training: bool = False):
    """Multi-head attention of ``queries_in`` over ``keys_in``.

    ``key_mask`` is an additive array broadcastable to the attention logits
    ``(..., heads, n_queries, n_keys)``.
    """
    head_dim = queries_in.shape[-1] // p.heads
    q = _split_heads(linear(queries_in, p.query), p.heads)
    k = _split_heads(linear(keys_in, p.key), p.heads)
    v = _split_heads(linear(keys_in, p.value), p.heads)
    logits = ad.mul(ad.matmul(q, ad.swapaxes(k, -1, -2)), 1.0 / math.sqrt(head_dim))
    if key_mask is not None:
        logits = ad.add(logits, Tensor(key_mask))
    probs = ad.softmax(logits, axis=-1)
    probs = ad.dropout(probs, dropout_p, rng, training)
    return linear(_merge_heads(ad.matmul(probs, v)), p.out)


def _ffn(x, p, dropout_p, rng, training):
    hidden = ad.dropout(ad.relu(linear(x, p.ffn_in)), dropout_p, rng, training)
    return linear(hidden, p.ffn_out)


def encoder_block(x, p: EncoderBlockParams, key_mask=None,
                  dropout_p: float = 0.0, rng=None, training: bool = False):
    normed = norm(x, p.attn_norm)
    x = ad.add(x, attention(normed, normed, p.attn, key_mask, dropout_p, rng, training))
    x = ad.add(x, _ffn(norm(x, p.ffn_norm), p, dropout_p, rng, training))
    return x


def decoder_block(x, words, p: DecoderBlockParams, self_mask=None, word_mask=None,
                  dropout_p: float = 0.0, rng=None, training: bool = False):
    normed = norm(x, p.self_norm)
    x = ad.add(x, attention(normed, normed, p.self_attn, self_mask, dropout_p, rng, training))
    x = ad.add(x, attention(norm(x, p.cross_norm), words, p.cross_attn, word_mask,
                            dropout_p, rng, training))
    x = ad.add(x, _ffn(norm(x, p.ffn_norm), p, dropout_p, rng, training))
    return x


def named_tensors(obj, prefix: str = ""):
    """Walk dataclasses/lists and yield (dotted name, Tensor) parameter pairs."""
    if isinstance(obj, Tensor):
        if obj.requires_grad:
            yield prefix, obj
    elif is_dataclass(obj):
        for f in fields(obj):
            child = getattr(obj, f.name)
            yield from named_tensors(child, f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, child in enumerate(obj):
            yield from named_tensors(child, f"{prefix}.{i}" if prefix else str(i))


def key_padding_mask(valid) -> np.ndarray:
    """Additive mask ``(..., 1, 1, n_keys)`` from a 0/1 validity array."""
    valid = np.asarray(valid, dtype=np.float64)
    return ((1.0 - valid) * MASKED_OUT)[..., None, None, :]
