"""The multi-view grounding model.

Per view, object features are fused with the utterance through a stack of
transformer decoder blocks (object self-attention, then cross-attention
with the word features, then a feed-forward); the per-view results are then
merged by an order-independent reduction. Because rotating the input scene
by a view-grid angle only permutes the per-view copies, the merged
representation -- and hence the grounding scores -- are invariant to such
rotations.

Aggregation can alternatively happen before fusion: either on the raw
positional encodings ("positional", which collapses the coordinates of all
views), or on per-view object features passed through a small
self-attention encoder ("object"). The default and strongest variant
aggregates after fusion ("fused").

Everything is dimension-general; ``forward`` runs one scene while
``forward_batch`` runs a padded, masked batch with identical semantics.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import rotation_matrix, view_angles
from .language import (LanguageEncoderParams, LanguageFeatures,
                       TextClassifierParams, Vocabulary, category_token_matrix,
                       encode_categories, encode_language, encode_sequences,
                       init_language_encoder, init_text_classifier, text_classify,
                       tokenize)
from .nn import (LinearParams, NormParams, decoder_block, encoder_block,
                 init_decoder_block, init_encoder_block, init_linear, init_norm,
                 key_padding_mask, linear, named_tensors, norm, MASKED_OUT)
from .objects import (ObjectEncoderParams, box_size, encode_point_features,
                      init_object_encoder, invariant_point_features,
                      positional_encoding)

AGGREGATION_FUNCTIONS = ("avg", "max", "avg+max")
AGGREGATION_STAGES = ("fused", "object", "positional")


@dataclass
class ModelConfig:
    view_count: int = 4
    width: int = 64
    heads: int = 4
    fusion_layers: int = 4
    lang_layers: int = 3
    pre_agg_layers: int = 2
    ffn_mult: int = 4
    point_hidden: int = 64
    point_feature_dim: int = 64
    aggregation_fn: str = "avg"
    aggregation_stage: str = "fused"
    alpha: float = 0.5
    dropout: float = 0.1
    rotation_augmentation: bool = True
    box_size_mode: str = "diagonal"
    max_seq_len: int = 24

    def __post_init__(self):
        if self.view_count < 1:
            raise ValueError("view_count must be at least 1")
        if self.alpha < 0.0:
            raise ValueError("alpha must be nonnegative")
        if self.aggregation_fn not in AGGREGATION_FUNCTIONS:
            raise ValueError(f"unknown aggregation function {self.aggregation_fn!r}")
        if self.aggregation_stage not in AGGREGATION_STAGES:
            raise ValueError(f"unknown aggregation stage {self.aggregation_stage!r}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class FusionDecoderParams:
    blocks: list
    out_norm: NormParams


@dataclass
class GroundingHeadParams:
    hidden: LinearParams
    out: LinearParams


@dataclass
class ModelParams:
    objects: ObjectEncoderParams
    language: LanguageEncoderParams
    text_head: TextClassifierParams
    fusion: FusionDecoderParams
    pre_agg: FusionDecoderParams | None
    grounding: GroundingHeadParams
    vocab: Vocabulary
    categories: list
    category_tokens: np.ndarray


@dataclass
class GroundingOutput:
    scores: Tensor               # (M,) grounding logits
    object_class_logits: Tensor  # (M, k2)
    text_class_logits: Tensor    # (k2,)
    aggregated: Tensor           # (M, d)


def init_model(rng, config: ModelConfig, categories) -> ModelParams:
    vocab = Vocabulary.build(categories)
    pre_agg = None
    if config.aggregation_stage == "object":
        pre_agg = FusionDecoderParams(
            blocks=[init_encoder_block(rng, config.width, config.heads, config.ffn_mult)
                    for _ in range(config.pre_agg_layers)],
            out_norm=init_norm(config.width),
        )
    return ModelParams(
        objects=init_object_encoder(rng, config.width, config.point_hidden,
                                    config.point_feature_dim, config.box_size_mode),
        language=init_language_encoder(rng, len(vocab), config.width,
                                       config.lang_layers, config.heads,
                                       config.max_seq_len, config.ffn_mult),
        text_head=init_text_classifier(rng, config.width, len(categories)),
        fusion=FusionDecoderParams(
            blocks=[init_decoder_block(rng, config.width, config.heads, config.ffn_mult)
                    for _ in range(config.fusion_layers)],
            out_norm=init_norm(config.width),
        ),
        pre_agg=pre_agg,
        grounding=GroundingHeadParams(
            hidden=init_linear(rng, config.width, config.width),
            out=init_linear(rng, config.width, 1),
        ),
        vocab=vocab,
        categories=list(categories),
        category_tokens=category_token_matrix(vocab, categories),
    )


def model_parameters(params: ModelParams):
    return list(named_tensors(params))


# ---------------------------------------------------------------------------
# fusion and aggregation


def fuse(object_features, language, params: FusionDecoderParams, obj_mask=None,
         word_mask=None, dropout_p: float = 0.0, rng=None, training: bool = False):
    """Decode object features (..., M, d) against word features (..., k1, d)."""
    words = language.words if isinstance(language, LanguageFeatures) else language
    x = ad.as_tensor(object_features)
    for block in params.blocks:
        x = decoder_block(x, words, block, obj_mask, word_mask, dropout_p, rng, training)
    return norm(x, params.out_norm)


def encode_pre_aggregation(object_features, params: FusionDecoderParams, obj_mask=None,
                           dropout_p: float = 0.0, rng=None, training: bool = False):
    """Self-attention encoder applied per view before early aggregation."""
    x = ad.as_tensor(object_features)
    for block in params.blocks:
        x = encoder_block(x, block, obj_mask, dropout_p, rng, training)
    return norm(x, params.out_norm)


def aggregate_axis(stacked, fn: str, axis: int = 0):
    if fn == "avg":
        return ad.mean_along(stacked, axis=axis)
    if fn == "max":
        return ad.max_along(stacked, axis=axis)
    if fn == "avg+max":
        return ad.add(ad.mean_along(stacked, axis=axis), ad.max_along(stacked, axis=axis))
    raise ValueError(f"unknown aggregation function {fn!r}")


def aggregate(view_features, fn: str = "avg"):
    """Order-independent reduction of per-view features to one tensor.

    Accepts a list of same-shape tensors (one per view) or an already
    stacked tensor whose leading axis is the view axis.
    """
    if isinstance(view_features, (list, tuple)):
        if not view_features:
            raise ValueError("aggregate needs at least one view")
        stacked = ad.stack(list(view_features), axis=0)
    else:
        stacked = ad.as_tensor(view_features)
        if stacked.shape[0] < 1:
            raise ValueError("aggregate needs at least one view")
    return aggregate_axis(stacked, fn, axis=0)


def grounding_scores(aggregated, params: GroundingHeadParams):
    """Two fully connected layers mapping (..., M, d) to (..., M) logits."""
    hidden = ad.gelu(linear(aggregated, params.hidden))
    out = linear(hidden, params.out)
    return ad.reshape(out, out.shape[:-1])


def object_class_logits(point_features, category_features):
    """Inner product of view-shared point features with category text features."""
    point_features = ad.as_tensor(point_features)
    category_features = ad.as_tensor(category_features)
    if point_features.shape[-1] != category_features.shape[-1]:
        raise ValueError(
            f"width mismatch: objects {point_features.shape[-1]} vs categories "
            f"{category_features.shape[-1]}"
        )
    return ad.matmul(point_features, ad.swapaxes(category_features, -1, -2))


# ---------------------------------------------------------------------------
# losses


def combine_losses(ref, text, obj, alpha: float):
    """Reference loss plus alpha-weighted auxiliary losses."""
    if alpha == 0.0:
        return ref
    return ref + (text + obj) * alpha


def compute_losses(output: GroundingOutput, utterance, object_categories, alpha: float) -> dict:
    """Grounding, text-classification, and object-classification losses."""
    object_categories = np.asarray(object_categories, dtype=np.int64)
    target = utterance.target_index
    if not 0 <= target < output.scores.shape[-1]:
        raise IndexError(f"target index {target} outside the candidate set")
    ref = ad.cross_entropy_logits(output.scores, target)
    text = ad.cross_entropy_logits(output.text_class_logits, int(object_categories[target]))
    obj = ad.mean_along(ad.cross_entropy_logits(output.object_class_logits, object_categories))
    return {"ref": ref, "text": text, "obj": obj,
            "total": combine_losses(ref, text, obj, alpha)}


# ---------------------------------------------------------------------------
# single-scene forward


def resolve_view_set(view_set) -> np.ndarray:
    if isinstance(view_set, (int, np.integer)):
        return view_angles(int(view_set))
    return np.atleast_1d(np.asarray(view_set, dtype=np.float64))


def _positional_stack(centers, sizes, angles, params):
    encodings, rotated_centers = [], []
    for angle in angles:
        rotated = centers @ rotation_matrix(float(angle)).T
        encodings.append(positional_encoding(rotated, sizes, params.position))
        rotated_centers.append(rotated)
    return encodings, rotated_centers


def forward(scene, utterance, view_set, params: ModelParams, config: ModelConfig,
            rng=None, training: bool = False) -> GroundingOutput:
    """Full grounding pass for one scene/utterance pair.

    The point encoder runs exactly once over the M objects no matter how
    many views are configured.
    """
    angles = resolve_view_set(view_set)
    drop = config.dropout
    token_ids = tokenize(utterance.tokens, params.vocab)
    lang = encode_language(token_ids, params.language, drop, rng, training)

    features = np.stack([invariant_point_features(o.points, o.center) for o in scene.objects])
    shared = encode_point_features(Tensor(features), params.objects.point)
    centers = np.stack([o.center for o in scene.objects])
    sizes = np.array([box_size(o.extent, params.objects.box_size_mode) for o in scene.objects])
    encodings, _ = _positional_stack(centers, sizes, angles, params.objects)

    aggregated = _staged_fusion(shared, encodings, lang.words, params, config,
                                None, None, drop, rng, training)
    scores = grounding_scores(aggregated, params.grounding)
    category_feats = encode_categories(params.category_tokens, params.language,
                                       drop, rng, training)
    return GroundingOutput(
        scores=scores,
        object_class_logits=object_class_logits(shared, category_feats),
        text_class_logits=text_classify(lang.sentence, params.text_head),
        aggregated=aggregated,
    )


def _staged_fusion(shared, encodings, words, params, config, obj_mask, word_mask,
                   drop, rng, training):
    """Apply the configured aggregation stage; returns (..., M, d) features."""
    stage, fn = config.aggregation_stage, config.aggregation_fn
    single = len(encodings) == 1

    if stage == "positional":
        pe = encodings[0] if single else aggregate_axis(ad.stack(encodings, 0), fn, 0)
        merged = ad.add(shared, pe)
        return fuse(merged, words, params.fusion, obj_mask, word_mask, drop, rng, training)

    if single:
        per_view = ad.add(shared, encodings[0])
    else:
        per_view = ad.add(ad.stack(encodings, 0), shared)

    if stage == "object":
        encoded = encode_pre_aggregation(per_view, params.pre_agg, obj_mask, drop, rng, training)
        merged = encoded if single else aggregate_axis(encoded, fn, 0)
        return fuse(merged, words, params.fusion, obj_mask, word_mask, drop, rng, training)

    # stage "fused": aggregate after multi-modal fusion
    fused = fuse(per_view, words, params.fusion, obj_mask, word_mask, drop, rng, training)
    return fused if single else aggregate_axis(fused, fn, 0)


# ---------------------------------------------------------------------------
# batched forward for training and evaluation


@dataclass
class Batch:
    point_features: np.ndarray   # (total objects, P, 6) invariant features
    scatter: tuple               # (batch indices, object indices) of those rows
    obj_valid: np.ndarray        # (B, M) 1 for real objects
    centers: np.ndarray          # (B, M, 3), pads zero
    sizes: np.ndarray            # (B, M), pads zero
    categories: np.ndarray       # (B, M) int, pads zero
    token_ids: np.ndarray        # (B, T) int, pads at the unknown id
    token_valid: np.ndarray      # (B, T)
    word_valid: np.ndarray       # (B, T-1) validity of positions after the marker
    targets: np.ndarray          # (B,)
    target_categories: np.ndarray  # (B,)
    difficulty: list = field(default_factory=list)
    view_tags: list = field(default_factory=list)

    def __len__(self):
        return self.obj_valid.shape[0]


@dataclass
class BatchOutput:
    scores: Tensor               # (B, M), pads not yet masked
    object_class_logits: Tensor  # (B, M, k2)
    text_class_logits: Tensor    # (B, k2)
    aggregated: Tensor           # (B, M, d)
    shared: Tensor               # (B, M, d)


def make_batch(samples, params: ModelParams, aug_angles=None) -> Batch:
    """Pad and mask a list of samples; optionally pre-rotate each scene.

    Rotation augmentation only needs to touch the box centers: the point
    features consumed by the encoder are rotation-invariant by construction.
    """
    n = len(samples)
    m_max = max(len(s.scene.objects) for s in samples)
    token_rows = [tokenize(s.utterance.tokens, params.vocab) for s in samples]
    t_max = max(len(row) for row in token_rows)

    centers = np.zeros((n, m_max, 3))
    sizes = np.zeros((n, m_max))
    categories = np.zeros((n, m_max), dtype=np.int64)
    obj_valid = np.zeros((n, m_max))
    token_ids = np.full((n, t_max), params.vocab.unknown_id, dtype=np.int64)
    token_valid = np.zeros((n, t_max))
    targets = np.zeros(n, dtype=np.int64)
    target_categories = np.zeros(n, dtype=np.int64)
    feature_rows, batch_idx, object_idx = [], [], []
    mode = params.objects.box_size_mode

    for i, sample in enumerate(samples):
        objs = sample.scene.objects
        m = len(objs)
        sample_centers = np.stack([o.center for o in objs])
        if aug_angles is not None:
            sample_centers = sample_centers @ rotation_matrix(float(aug_angles[i])).T
        centers[i, :m] = sample_centers
        sizes[i, :m] = [box_size(o.extent, mode) for o in objs]
        categories[i, :m] = [o.category_id for o in objs]
        obj_valid[i, :m] = 1.0
        feature_rows.append(np.stack([invariant_point_features(o.points, o.center) for o in objs]))
        batch_idx.extend([i] * m)
        object_idx.extend(range(m))
        row = token_rows[i]
        token_ids[i, : len(row)] = row
        token_valid[i, : len(row)] = 1.0
        targets[i] = sample.utterance.target_index
        target_categories[i] = objs[sample.utterance.target_index].category_id

    return Batch(
        point_features=np.concatenate(feature_rows, axis=0),
        scatter=(np.array(batch_idx), np.array(object_idx)),
        obj_valid=obj_valid,
        centers=centers,
        sizes=sizes,
        categories=categories,
        token_ids=token_ids,
        token_valid=token_valid,
        word_valid=token_valid[:, 1:].copy(),
        targets=targets,
        target_categories=target_categories,
        difficulty=[s.difficulty for s in samples],
        view_tags=[s.view_tag for s in samples],
    )


def forward_batch(batch: Batch, params: ModelParams, config: ModelConfig,
                  view_set=None, rng=None, training: bool = False) -> BatchOutput:
    """Batched forward; ``view_set`` overrides the configured view count."""
    angles = resolve_view_set(config.view_count if view_set is None else view_set)
    drop = config.dropout
    n, m_max = batch.obj_valid.shape

    shared_flat = encode_point_features(Tensor(batch.point_features), params.objects.point)
    shared = ad.scatter_rows(shared_flat, batch.scatter, (n, m_max, config.width))

    lang_seq = encode_sequences(batch.token_ids, params.language, batch.token_valid,
                                drop, rng, training)
    sentence = lang_seq[:, 0]
    words = lang_seq[:, 1:]
    word_mask = key_padding_mask(batch.word_valid)
    obj_mask = key_padding_mask(batch.obj_valid)

    encodings, _ = _positional_stack(batch.centers, batch.sizes, angles, params.objects)
    aggregated = _staged_fusion(shared, encodings, words, params, config,
                                obj_mask, word_mask, drop, rng, training)
    category_feats = encode_categories(params.category_tokens, params.language,
                                       drop, rng, training)
    return BatchOutput(
        scores=grounding_scores(aggregated, params.grounding),
        object_class_logits=object_class_logits(shared, category_feats),
        text_class_logits=text_classify(sentence, params.text_head),
        aggregated=aggregated,
        shared=shared,
    )


def batch_losses(output: BatchOutput, batch: Batch, alpha: float) -> dict:
    """Batch-mean losses; padded objects are excluded everywhere."""
    pad_penalty = Tensor((1.0 - batch.obj_valid) * MASKED_OUT)
    masked_scores = ad.add(output.scores, pad_penalty)
    ref = ad.mean_along(ad.cross_entropy_logits(masked_scores, batch.targets))
    text = ad.mean_along(ad.cross_entropy_logits(output.text_class_logits,
                                                 batch.target_categories))
    per_object = ad.cross_entropy_logits(output.object_class_logits, batch.categories)
    counts = batch.obj_valid.sum(axis=1)
    per_sample = ad.mul(ad.sum_along(ad.mul(per_object, Tensor(batch.obj_valid)), axis=1),
                        Tensor(1.0 / counts))
    obj = ad.mean_along(per_sample)
    return {"ref": ref, "text": text, "obj": obj,
            "total": combine_losses(ref, text, obj, alpha)}


def predict(output: BatchOutput, batch: Batch) -> np.ndarray:
    """Argmax grounding prediction per sample, restricted to real objects."""
    scores = output.scores.data + (1.0 - batch.obj_valid) * MASKED_OUT
    return scores.argmax(axis=1)
