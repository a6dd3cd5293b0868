import math

import numpy as np
import pytest

from multiview_grounding import autodiff as ad
from multiview_grounding import model as mdl
from multiview_grounding import objects as ob
from multiview_grounding.autodiff import Tape, Tensor
from multiview_grounding.geometry import view_angles
from multiview_grounding.language import encode_categories, encode_language, text_classify, tokenize
from multiview_grounding.scenes import DatasetConfig, Sample, generate_sample, rotate_scene

SMALL = dict(width=16, point_hidden=8, point_feature_dim=8, fusion_layers=2,
             lang_layers=2, heads=2, pre_agg_layers=1, dropout=0.0)


def small_model(view_count=4, seed=0, **overrides):
    config = mdl.ModelConfig(view_count=view_count, **{**SMALL, **overrides})
    categories = DatasetConfig().categories
    params = mdl.init_model(np.random.default_rng(seed), config, categories)
    return params, config


@pytest.fixture
def sample(rng):
    return generate_sample(rng, DatasetConfig(points_per_object=16), "s")


# ---------------------------------------------------------------------------
# fuse


def test_fuse_object_permutation_equivariance(rng):
    params, config = small_model()
    objects = Tensor(rng.standard_normal((5, 16)))
    words = Tensor(rng.standard_normal((3, 16)))
    fused = mdl.fuse(objects, words, params.fusion).data
    perm = rng.permutation(5)
    fused_perm = mdl.fuse(Tensor(objects.data[perm]), words, params.fusion).data
    np.testing.assert_allclose(fused_perm, fused[perm], atol=1e-10)


def test_fuse_single_object_is_finite(rng):
    params, config = small_model()
    fused = mdl.fuse(Tensor(rng.standard_normal((1, 16))),
                     Tensor(rng.standard_normal((4, 16))), params.fusion)
    assert np.isfinite(fused.data).all()
    assert fused.shape == (1, 16)


def test_fuse_batched_views_match_view_loop(rng):
    params, config = small_model()
    stack = rng.standard_normal((3, 4, 16))
    words = Tensor(rng.standard_normal((2, 16)))
    batched = mdl.fuse(Tensor(stack), words, params.fusion).data
    for j in range(3):
        single = mdl.fuse(Tensor(stack[j]), words, params.fusion).data
        np.testing.assert_allclose(batched[j], single, atol=1e-12)


def test_fuse_gradient_small(rng):
    params, config = small_model()
    objects = rng.standard_normal((2, 16))
    words = rng.standard_normal((2, 16))
    probe = params.fusion.blocks[0].cross_attn.value.weight
    w = rng.standard_normal((2, 16))

    with Tape() as tape:
        out = ad.sum_along(ad.mul(mdl.fuse(Tensor(objects), Tensor(words), params.fusion), w))
    tape.backward(out)
    analytic = probe.grad.copy()

    from conftest import numeric_gradient

    def build(wv):
        probe.data = np.asarray(wv.data)
        return ad.sum_along(ad.mul(mdl.fuse(Tensor(objects), Tensor(words), params.fusion), w))

    numeric = numeric_gradient(build, [probe.data.copy()], 0)
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-6)
    assert np.abs(analytic - numeric).max() / scale < 1e-4


# ---------------------------------------------------------------------------
# aggregation


def test_aggregate_single_view_identity(rng):
    f = Tensor(rng.standard_normal((4, 8)))
    for fn in ("avg", "max"):
        np.testing.assert_array_equal(mdl.aggregate([f], fn).data, f.data)


def test_aggregate_identical_views(rng):
    f = rng.standard_normal((4, 8))
    views = [Tensor(f.copy()) for _ in range(3)]
    np.testing.assert_allclose(mdl.aggregate(views, "avg").data, f, atol=1e-15)
    np.testing.assert_array_equal(mdl.aggregate(views, "max").data, f)


def test_aggregate_order_independent(rng):
    views = [Tensor(rng.standard_normal((4, 8))) for _ in range(4)]
    for fn in ("avg", "max", "avg+max"):
        fwd = mdl.aggregate(views, fn).data
        rev = mdl.aggregate(views[::-1], fn).data
        if fn == "max":
            np.testing.assert_array_equal(rev, fwd)
        else:
            np.testing.assert_allclose(rev, fwd, atol=1e-12)


def test_aggregate_avg_plus_max_is_sum_of_both(rng):
    views = [Tensor(rng.standard_normal((3, 5))) for _ in range(3)]
    combined = mdl.aggregate(views, "avg+max").data
    np.testing.assert_allclose(
        combined, mdl.aggregate(views, "avg").data + mdl.aggregate(views, "max").data,
        atol=1e-15,
    )


def test_aggregate_empty_rejected():
    with pytest.raises(ValueError):
        mdl.aggregate([], "avg")
    with pytest.raises(ValueError):
        mdl.aggregate([Tensor(np.ones((2, 2)))], "median")


# ---------------------------------------------------------------------------
# heads


def test_grounding_scores_rowwise(rng):
    params, config = small_model()
    g = rng.standard_normal((3, 16))
    g[2] = g[0]  # duplicate object rows
    scores = mdl.grounding_scores(Tensor(g), params.grounding).data
    assert scores.shape == (3,)
    assert scores[2] == scores[0]


def test_grounding_scores_zero_weights(rng):
    params, config = small_model()
    for p in (params.grounding.hidden.weight, params.grounding.hidden.bias,
              params.grounding.out.weight, params.grounding.out.bias):
        p.data = np.zeros_like(p.data)
    scores = mdl.grounding_scores(Tensor(rng.standard_normal((5, 16))), params.grounding)
    np.testing.assert_array_equal(scores.data, np.zeros(5))


def test_object_class_logits_orthogonal_rows():
    x = np.zeros((2, 4))
    x[0] = [1.0, 0.0, 0.0, 0.0]
    c = np.zeros((3, 4))
    c[:, 1] = 1.0  # all categories orthogonal to object 0
    logits = mdl.object_class_logits(Tensor(x), Tensor(c)).data
    np.testing.assert_array_equal(logits[0], np.zeros(3))


def test_object_class_logits_matching_row_wins(rng):
    c = rng.standard_normal((5, 8))
    c /= np.linalg.norm(c, axis=1, keepdims=True)
    x = c[3][None]
    logits = mdl.object_class_logits(Tensor(x), Tensor(c)).data
    assert logits[0].argmax() == 3


def test_object_class_logits_width_mismatch():
    with pytest.raises(ValueError):
        mdl.object_class_logits(Tensor(np.ones((2, 4))), Tensor(np.ones((3, 5))))


# ---------------------------------------------------------------------------
# losses


def test_loss_combination_matches_weighted_sum():
    assert mdl.combine_losses(1.0, 0.4, 0.6, 0.5) == 1.5


def test_loss_alpha_zero_is_reference_loss_exactly(rng, sample):
    params, config = small_model(view_count=2, dropout=0.0)
    out = mdl.forward(sample.scene, sample.utterance, 2, params, config)
    cats = [o.category_id for o in sample.scene.objects]
    losses = mdl.compute_losses(out, sample.utterance, cats, alpha=0.0)
    assert losses["total"] is losses["ref"]


def test_compute_losses_values(rng, sample):
    params, config = small_model(view_count=2)
    out = mdl.forward(sample.scene, sample.utterance, 2, params, config)
    cats = [o.category_id for o in sample.scene.objects]
    losses = mdl.compute_losses(out, sample.utterance, cats, alpha=0.5)
    expected = losses["ref"].item() + 0.5 * (losses["text"].item() + losses["obj"].item())
    assert abs(losses["total"].item() - expected) < 1e-12
    assert losses["ref"].item() > 0.0


def test_compute_losses_bad_target(rng, sample):
    params, config = small_model(view_count=2)
    out = mdl.forward(sample.scene, sample.utterance, 2, params, config)
    cats = [o.category_id for o in sample.scene.objects]
    bad = type(sample.utterance)(**{**sample.utterance.__dict__, "target_index": 99})
    with pytest.raises(IndexError):
        mdl.compute_losses(out, bad, cats, alpha=0.5)


# ---------------------------------------------------------------------------
# forward: collapse, invariance, equivariance, decoupling


def test_forward_n1_equals_single_view_pipeline_bitwise(rng):
    # compose the plain single-view pipeline from the public ops and compare
    params, config = small_model(view_count=1)
    for trial in range(10):
        sample = generate_sample(rng, DatasetConfig(points_per_object=8), f"s{trial}")
        out = mdl.forward(sample.scene, sample.utterance, 1, params, config)

        mv = ob.encode_scene(sample.scene, view_angles(1), params.objects)
        ids = tokenize(sample.utterance.tokens, params.vocab)
        lang = encode_language(ids, params.language)
        fused = mdl.fuse(mv.per_view[0], lang.words, params.fusion)
        scores = mdl.grounding_scores(fused, params.grounding)
        cats = encode_categories(params.category_tokens, params.language)

        np.testing.assert_array_equal(out.scores.data, scores.data)
        np.testing.assert_array_equal(out.aggregated.data, fused.data)
        np.testing.assert_array_equal(
            out.object_class_logits.data, mdl.object_class_logits(mv.shared, cats).data
        )
        np.testing.assert_array_equal(
            out.text_class_logits.data, text_classify(lang.sentence, params.text_head).data
        )


@pytest.mark.parametrize("n_views", [2, 4, 8])
@pytest.mark.parametrize("fn", ["avg", "max"])
def test_forward_view_grid_rotation_invariance(rng, n_views, fn):
    params, config = small_model(view_count=n_views, aggregation_fn=fn)
    sample = generate_sample(rng, DatasetConfig(points_per_object=16), "s")
    base = mdl.forward(sample.scene, sample.utterance, n_views, params, config)
    for k in range(1, n_views):
        rotated = rotate_scene(sample.scene, 2.0 * math.pi * k / n_views)
        out = mdl.forward(rotated, sample.utterance, n_views, params, config)
        assert np.abs(out.scores.data - base.scores.data).max() < 1e-6
        assert np.abs(out.aggregated.data - base.aggregated.data).max() < 1e-6


def test_forward_off_grid_rotation_not_required_invariant(rng):
    params, config = small_model(view_count=4)
    sample = generate_sample(rng, DatasetConfig(points_per_object=16), "s")
    base = mdl.forward(sample.scene, sample.utterance, 4, params, config)
    rotated = rotate_scene(sample.scene, math.pi / 3.0)
    out = mdl.forward(rotated, sample.utterance, 4, params, config)
    assert np.abs(out.scores.data - base.scores.data).max() > 1e-6


@pytest.mark.parametrize("stage", ["fused", "object", "positional"])
def test_forward_stage_invariance_and_shapes(rng, stage):
    params, config = small_model(view_count=4, aggregation_stage=stage)
    sample = generate_sample(rng, DatasetConfig(points_per_object=16), "s")
    m = len(sample.scene.objects)
    base = mdl.forward(sample.scene, sample.utterance, 4, params, config)
    assert base.scores.shape == (m,)
    assert base.aggregated.shape == (m, 16)
    rotated = rotate_scene(sample.scene, math.pi)
    out = mdl.forward(rotated, sample.utterance, 4, params, config)
    assert np.abs(out.scores.data - base.scores.data).max() < 1e-6


def test_forward_object_permutation_equivariance(rng):
    params, config = small_model(view_count=2)
    sample = generate_sample(rng, DatasetConfig(points_per_object=16), "s")
    base = mdl.forward(sample.scene, sample.utterance, 2, params, config).scores.data
    perm = rng.permutation(len(sample.scene.objects))
    scene = type(sample.scene)(
        scene_id=sample.scene.scene_id,
        objects=[sample.scene.objects[i] for i in perm],
    )
    out = mdl.forward(scene, sample.utterance, 2, params, config).scores.data
    np.testing.assert_allclose(out, base[perm], atol=1e-9)


def test_forward_runs_point_encoder_once_per_object(rng, sample):
    m = len(sample.scene.objects)
    for n_views in (1, 4, 8):
        params, config = small_model(view_count=n_views)
        params.objects.point.calls = 0
        mdl.forward(sample.scene, sample.utterance, n_views, params, config)
        assert params.objects.point.calls == m


# ---------------------------------------------------------------------------
# batched path agrees with the single-sample path


def test_forward_batch_matches_single(rng):
    params, config = small_model(view_count=2)
    samples = [generate_sample(rng, DatasetConfig(points_per_object=8), f"s{i}")
               for i in range(4)]
    batch = mdl.make_batch(samples, params)
    out = mdl.forward_batch(batch, params, config)
    for i, sample in enumerate(samples):
        single = mdl.forward(sample.scene, sample.utterance, 2, params, config)
        m = len(sample.scene.objects)
        np.testing.assert_allclose(out.scores.data[i, :m], single.scores.data, atol=1e-9)
        np.testing.assert_allclose(out.text_class_logits.data[i],
                                   single.text_class_logits.data, atol=1e-9)
        np.testing.assert_allclose(out.object_class_logits.data[i, :m],
                                   single.object_class_logits.data, atol=1e-9)


def test_batch_losses_match_single_losses(rng):
    params, config = small_model(view_count=2)
    samples = [generate_sample(rng, DatasetConfig(points_per_object=8), f"s{i}")
               for i in range(3)]
    batch = mdl.make_batch(samples, params)
    out = mdl.forward_batch(batch, params, config)
    batched = mdl.batch_losses(out, batch, alpha=0.5)
    singles = []
    for sample in samples:
        single_out = mdl.forward(sample.scene, sample.utterance, 2, params, config)
        cats = [o.category_id for o in sample.scene.objects]
        singles.append(mdl.compute_losses(single_out, sample.utterance, cats, alpha=0.5))
    for key in ("ref", "text", "obj", "total"):
        mean = np.mean([s[key].item() for s in singles])
        assert abs(batched[key].item() - mean) < 1e-9, key


def test_rotation_augmentation_preserves_targets(rng):
    # pre-rotating a scene never changes which object index is correct
    params, config = small_model(view_count=2)
    samples = [generate_sample(rng, DatasetConfig(points_per_object=8), f"s{i}")
               for i in range(3)]
    angles = np.array([0.0, math.pi / 2.0, math.pi])
    batch = mdl.make_batch(samples, params, aug_angles=angles)
    np.testing.assert_array_equal(
        batch.targets, [s.utterance.target_index for s in samples]
    )
    rotated = batch.centers[1, : len(samples[1].scene.objects)]
    original = np.stack([o.center for o in samples[1].scene.objects])
    assert np.abs(rotated - original).max() > 1e-9
