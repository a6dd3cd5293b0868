"""Utterance encoding over the template vocabulary.

A small trainable transformer encoder stands in for a pretrained text
model: token + learned position embeddings, a stack of pre-norm
self-attention blocks, and a final layer norm. Position 0 holds a sentence marker whose
output is the sentence-level feature; the remaining positions are per-word
features. The same encoder also embeds category label texts, recomputed on
every step so the auxiliary classification loss reaches the encoder.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, parameter
from .nn import (EncoderBlockParams, LinearParams, NormParams, encoder_block,
                 init_encoder_block, init_linear, init_norm, key_padding_mask,
                 linear, norm)

SENTENCE_MARKER = "<s>"
UNKNOWN = "<unk>"

TEMPLATE_WORDS = (
    "the", "that", "is", "left", "of", "right", "in", "front", "behind",
    "nearest", "to", "farthest", "from", "closest", "center",
)


@dataclass
class Vocabulary:
    """Frozen token-to-index map: marker, unknown, template words, categories."""

    index: dict

    @classmethod
    def build(cls, categories) -> "Vocabulary":
        tokens = [SENTENCE_MARKER, UNKNOWN, *TEMPLATE_WORDS, *categories]
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary tokens must be unique")
        return cls(index={tok: i for i, tok in enumerate(tokens)})

    def __len__(self):
        return len(self.index)

    @property
    def marker_id(self) -> int:
        return self.index[SENTENCE_MARKER]

    @property
    def unknown_id(self) -> int:
        return self.index[UNKNOWN]

    def to_json(self) -> str:
        return json.dumps({"index": self.index})

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        return cls(index={k: int(v) for k, v in json.loads(text)["index"].items()})


def tokenize(utterance, vocab: Vocabulary) -> np.ndarray:
    """Token ids with the sentence marker prepended; unknown words map to <unk>."""
    if isinstance(utterance, str):
        words = utterance.lower().split()
    else:
        words = list(utterance)
    if not words:
        raise ValueError("cannot tokenize an empty utterance")
    unk = vocab.unknown_id
    return np.array([vocab.marker_id] + [vocab.index.get(w, unk) for w in words], dtype=np.int64)


@dataclass
class LanguageFeatures:
    sentence: Tensor    # (..., d)
    words: Tensor       # (..., k1, d) — everything after the marker


@dataclass
class LanguageEncoderParams:
    token_embedding: Tensor
    position_embedding: Tensor
    blocks: list
    out_norm: NormParams
    max_len: int = 24


@dataclass
class TextClassifierParams:
    hidden: LinearParams
    out: LinearParams


def init_language_encoder(rng, vocab_size: int, width: int, layers: int = 3,
                          heads: int = 4, max_len: int = 24,
                          ffn_mult: int = 4) -> LanguageEncoderParams:
    return LanguageEncoderParams(
        token_embedding=parameter(rng.normal(0.0, 0.1, size=(vocab_size, width))),
        position_embedding=parameter(rng.normal(0.0, 0.1, size=(max_len, width))),
        blocks=[init_encoder_block(rng, width, heads, ffn_mult) for _ in range(layers)],
        out_norm=init_norm(width),
        max_len=max_len,
    )


def init_text_classifier(rng, width: int, n_categories: int) -> TextClassifierParams:
    return TextClassifierParams(
        hidden=init_linear(rng, width, width),
        out=init_linear(rng, width, n_categories),
    )


def encode_sequences(token_ids, params: LanguageEncoderParams, valid=None,
                     dropout_p: float = 0.0, rng=None, training: bool = False) -> Tensor:
    """Contextual features for (..., T) token ids; returns (..., T, d)."""
    token_ids = np.asarray(token_ids, dtype=np.int64)
    length = token_ids.shape[-1]
    if length > params.max_len:
        raise ValueError(f"sequence length {length} exceeds the maximum {params.max_len}")
    x = ad.add(
        ad.embedding(params.token_embedding, token_ids),
        ad.embedding(params.position_embedding, np.arange(length)),
    )
    mask = None if valid is None else key_padding_mask(valid)
    for block in params.blocks:
        x = encoder_block(x, block, mask, dropout_p, rng, training)
    return norm(x, params.out_norm)


def encode_language(token_ids, params: LanguageEncoderParams,
                    dropout_p: float = 0.0, rng=None, training: bool = False) -> LanguageFeatures:
    """Sentence-level and per-word features for one marker-prefixed utterance."""
    token_ids = np.asarray(token_ids, dtype=np.int64)
    if token_ids.ndim != 1 or token_ids.shape[0] < 2:
        raise ValueError("expected a 1-d id sequence: marker plus at least one word")
    out = encode_sequences(token_ids, params, None, dropout_p, rng, training)
    return LanguageFeatures(sentence=out[0], words=out[1:])


def text_classify(sentence_feature, params: TextClassifierParams) -> Tensor:
    """Two fully connected layers from the sentence feature to category logits."""
    sentence_feature = ad.as_tensor(sentence_feature)
    flat = sentence_feature.ndim == 1
    if flat:
        sentence_feature = ad.reshape(sentence_feature, (1, -1))
    logits = linear(ad.gelu(linear(sentence_feature, params.hidden)), params.out)
    return logits[0] if flat else logits


def category_token_matrix(vocab: Vocabulary, categories) -> np.ndarray:
    """(k2, 2) id rows [marker, category word] for every category label."""
    return np.stack([tokenize([word], vocab) for word in categories])


def encode_categories(category_tokens, params: LanguageEncoderParams,
                      dropout_p: float = 0.0, rng=None, training: bool = False) -> Tensor:
    """Sentence-level features of the category label texts, one row each.

    Recomputed through the trainable encoder on every call: this is what
    lets the object-classification loss fine-tune the language side.
    """
    category_tokens = np.asarray(category_tokens, dtype=np.int64)
    if category_tokens.ndim != 2 or category_tokens.shape[0] < 1:
        raise ValueError("expected a (k2, T) matrix of category token ids")
    out = encode_sequences(category_tokens, params, None, dropout_p, rng, training)
    return out[:, 0]
