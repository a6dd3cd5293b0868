import math

import numpy as np
import pytest

from multiview_grounding import autodiff as ad
from multiview_grounding import objects as ob
from multiview_grounding.autodiff import Tape, Tensor
from multiview_grounding.geometry import view_angles
from multiview_grounding.scenes import DatasetConfig, generate_scene

from conftest import check_gradients, numeric_gradient


@pytest.fixture
def encoder(rng):
    return ob.init_object_encoder(rng, width=16, point_hidden=8, point_feature_dim=8)


def random_cloud(rng, n=20):
    return np.concatenate(
        [rng.uniform(0, 1, size=(n, 3)), rng.standard_normal((n, 3))], axis=1
    )


# ---------------------------------------------------------------------------
# point-set encoder


def test_encode_points_permutation_invariant(rng, encoder):
    cloud = random_cloud(rng)
    base = ob.encode_points(cloud, encoder.point)
    shuffled = ob.encode_points(cloud[rng.permutation(len(cloud))], encoder.point)
    np.testing.assert_array_equal(shuffled.data, base.data)


def test_encode_points_duplication_invariant(rng, encoder):
    cloud = random_cloud(rng)
    base = ob.encode_points(cloud, encoder.point)
    doubled = ob.encode_points(np.concatenate([cloud, cloud]), encoder.point)
    np.testing.assert_array_equal(doubled.data, base.data)


def test_encode_points_rejects_empty(encoder):
    with pytest.raises(ValueError):
        ob.encode_points(np.zeros((0, 6)), encoder.point)
    with pytest.raises(ValueError):
        ob.encode_points(np.zeros((5, 4)), encoder.point)


def test_encode_points_rotation_invariant_features(rng, encoder):
    # the invariant featurization makes z-rotations invisible to the encoder
    from multiview_grounding.geometry import rotation_matrix

    cloud = random_cloud(rng)
    center = rng.standard_normal(3)
    base = ob.encode_points(cloud, encoder.point, center=center)
    rot = rotation_matrix(1.1)
    moved = cloud.copy()
    moved[:, 3:6] = moved[:, 3:6] @ rot.T
    rotated = ob.encode_points(moved, encoder.point, center=center @ rot.T)
    np.testing.assert_allclose(rotated.data, base.data, atol=1e-12)


def test_encode_points_weight_gradients(rng, encoder):
    cloud = random_cloud(rng, n=6)
    w = rng.standard_normal(16)
    probe_params = (encoder.point.point_mlp1.weight, encoder.point.post_pool.bias)

    with Tape() as tape:
        out = ad.sum_along(ad.mul(ob.encode_points(cloud, encoder.point), w))
    tape.backward(out)
    analytic = [p.grad.copy() for p in probe_params]

    # numeric side: rebuild the forward with perturbed copies of each weight
    arrays = [p.data.copy() for p in probe_params]

    def build(w1, b3):
        probe_params[0].data = np.asarray(w1.data)
        probe_params[1].data = np.asarray(b3.data)
        return ad.sum_along(ad.mul(ob.encode_points(cloud, encoder.point), w))

    for i, reference in enumerate(analytic):
        numeric = numeric_gradient(build, arrays, i)
        scale = max(np.abs(numeric).max(), np.abs(reference).max(), 1e-6)
        assert np.abs(reference - numeric).max() / scale < 1e-4


# ---------------------------------------------------------------------------
# box size


def test_box_size_diagonal():
    assert ob.box_size(np.array([1.0, 2.0, 2.0])) == 3.0


def test_box_size_rejects_degenerate_extents():
    with pytest.raises(ValueError):
        ob.box_size(np.array([1.0, 0.0, 0.0]))
    with pytest.raises(ValueError):
        ob.box_size(np.array([3.0, 4.0, 0.0]))
    with pytest.raises(ValueError):
        ob.box_size(np.array([3.0, 4.0, 1e-9]))
    # smallest allowed extent passes
    assert ob.box_size(np.array([1e-3, 1e-3, 1e-3])) > 0.0


def test_box_size_alternative_modes():
    extent = np.array([1.0, 2.0, 3.0])
    assert ob.box_size(extent, mode="volume") == 6.0
    assert ob.box_size(extent, mode="max") == 3.0
    with pytest.raises(ValueError):
        ob.box_size(extent, mode="area")


# ---------------------------------------------------------------------------
# positional encoding


def test_positional_encoding_deterministic(rng, encoder):
    center = rng.standard_normal(3)
    a = ob.positional_encoding(center, 1.5, encoder.position)
    b = ob.positional_encoding(center.copy(), 1.5, encoder.position)
    np.testing.assert_array_equal(a.data, b.data)


def test_positional_encoding_differs_across_views(rng, encoder):
    from multiview_grounding.geometry import rotate_center

    center = np.array([1.0, 0.5, 0.3])
    base = ob.positional_encoding(center, 1.0, encoder.position)
    rotated = ob.positional_encoding(rotate_center(center, math.pi / 2), 1.0, encoder.position)
    assert np.abs(base.data - rotated.data).max() > 1e-6


def test_positional_encoding_gradient(rng, encoder):
    center = rng.standard_normal(3)
    w = rng.standard_normal(16)
    packed = np.concatenate([center, [1.2]])

    def build(wb):
        from multiview_grounding.nn import norm
        return ad.sum_along(ad.mul(
            norm(ad.matmul(ad.reshape(Tensor(packed), (1, 4)), wb), encoder.position.out_norm),
            w,
        ))

    check_gradients(build, [encoder.position.project.weight.data.copy()], tol=1e-4)


# ---------------------------------------------------------------------------
# scene encoding and the decoupling contract


@pytest.fixture
def scene(rng):
    return generate_scene(rng, DatasetConfig(points_per_object=12), "s")


def test_encode_scene_single_view_matches_slice(rng, scene, encoder):
    multi = ob.encode_scene(scene, view_angles(4), encoder)
    single = ob.encode_scene(scene, view_angles(1), encoder)
    np.testing.assert_array_equal(multi.per_view.data[0], single.per_view.data[0])
    np.testing.assert_array_equal(multi.shared.data, single.shared.data)


def test_encode_scene_shared_block_independent_of_views(rng, scene, encoder):
    reference = ob.encode_scene(scene, view_angles(1), encoder).shared.data
    for n in (2, 4, 8):
        shared = ob.encode_scene(scene, view_angles(n), encoder).shared.data
        np.testing.assert_array_equal(shared, reference)


def test_encode_scene_counts_m_calls_regardless_of_views(rng, scene, encoder):
    m = len(scene.objects)
    for n in (1, 2, 4, 8):
        encoder.point.calls = 0
        ob.encode_scene(scene, view_angles(n), encoder)
        assert encoder.point.calls == m


def test_encode_scene_additive_view_structure(rng, scene, encoder):
    # differences between views carry only positional information:
    # o_j - o_k = pe_j - pe_k up to float addition rounding
    mv = ob.encode_scene(scene, view_angles(4), encoder)
    sizes = np.array([ob.box_size(o.extent) for o in scene.objects])
    encodings = [
        ob.positional_encoding(mv.centers_per_view[j], sizes, encoder.position).data
        for j in range(4)
    ]
    for j in range(4):
        for k in range(4):
            np.testing.assert_allclose(
                mv.per_view.data[j] - mv.per_view.data[k],
                encodings[j] - encodings[k],
                atol=1e-12,
            )


def test_encode_scene_view_zero_centers_untouched(scene, encoder):
    mv = ob.encode_scene(scene, view_angles(4), encoder)
    np.testing.assert_array_equal(
        mv.centers_per_view[0], np.stack([o.center for o in scene.objects])
    )
