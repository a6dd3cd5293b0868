"""Object feature encoding: view-shared point features plus per-view
positional encodings.

Point features are computed once per object and shared across all views;
only the positional encoding of the (rotated) box center differs per view.
The point-set encoder consumes per-point features that are invariant to
rotations about the z-axis — color, horizontal radius from the box center,
height offset, and radial distance — so a rigidly rotated scene reproduces
the same point features and view robustness holds end to end.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import rotation_matrix
from .nn import LinearParams, NormParams, init_linear, init_norm, linear, norm

MIN_EXTENT = 1e-3

BOX_SIZE_MODES = ("diagonal", "volume", "max")


@dataclass
class PointSetEncoderParams:
    point_mlp1: LinearParams    # 6 -> hidden, shared across points
    point_mlp2: LinearParams    # hidden -> hidden
    post_pool: LinearParams     # hidden -> feature dim
    project: LinearParams       # feature dim -> model width, no bias
    out_norm: NormParams
    calls: int = 0              # objects encoded so far; the decoupling witness


@dataclass
class PositionalEncoderParams:
    project: LinearParams       # 4 -> model width, no bias
    out_norm: NormParams


@dataclass
class ObjectEncoderParams:
    point: PointSetEncoderParams
    position: PositionalEncoderParams
    box_size_mode: str = "diagonal"


@dataclass
class MultiViewObjectFeatures:
    shared: Tensor              # (M, d) view-independent point features
    per_view: Tensor            # (N, M, d) point features + per-view encoding
    centers_per_view: np.ndarray  # (N, M, 3)


def init_object_encoder(rng, width: int, point_hidden: int = 64,
                        point_feature_dim: int = 64,
                        box_size_mode: str = "diagonal") -> ObjectEncoderParams:
    if box_size_mode not in BOX_SIZE_MODES:
        raise ValueError(f"unknown box size mode {box_size_mode!r}")
    return ObjectEncoderParams(
        point=PointSetEncoderParams(
            point_mlp1=init_linear(rng, 6, point_hidden),
            point_mlp2=init_linear(rng, point_hidden, point_hidden),
            post_pool=init_linear(rng, point_hidden, point_feature_dim),
            project=init_linear(rng, point_feature_dim, width, bias=False),
            out_norm=init_norm(width),
        ),
        position=PositionalEncoderParams(
            project=init_linear(rng, 4, width, bias=False),
            out_norm=init_norm(width),
        ),
        box_size_mode=box_size_mode,
    )


def invariant_point_features(points, center=None) -> np.ndarray:
    """Map (..., P, 6) r,g,b,x,y,z points to z-rotation-invariant features.

    Output columns: r, g, b, horizontal radius, height offset, distance, all
    measured from ``center`` (or the origin). Per-point only, so permutation
    and duplication of points are preserved bit-exactly.
    """
    points = np.asarray(points, dtype=np.float64)
    rgb = points[..., 0:3]
    offsets = points[..., 3:6]
    if center is not None:
        offsets = offsets - np.asarray(center, dtype=np.float64)[..., None, :]
    radius = np.hypot(offsets[..., 0], offsets[..., 1])
    height = offsets[..., 2]
    distance = np.sqrt(radius**2 + height**2)
    return np.concatenate([rgb, np.stack([radius, height, distance], axis=-1)], axis=-1)


def encode_point_features(features, params: PointSetEncoderParams) -> Tensor:
    """Shared-MLP + max-pool encoder over (..., P, 6) invariant features."""
    features = ad.as_tensor(features)
    hidden = ad.relu(linear(features, params.point_mlp1))
    hidden = ad.relu(linear(hidden, params.point_mlp2))
    pooled = ad.max_along(hidden, axis=-2)
    pooled = ad.relu(linear(pooled, params.post_pool))
    params.calls += int(np.prod(features.shape[:-2], dtype=np.int64))
    return norm(linear(pooled, params.project), params.out_norm)


def encode_points(points, params: PointSetEncoderParams, center=None) -> Tensor:
    """Point cloud (P, 6) of one object to a width-d feature vector."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[-1] != 6 or points.shape[0] < 1:
        raise ValueError(f"expected a nonempty (P, 6) point array, got {points.shape}")
    features = invariant_point_features(points, center)[None]
    return encode_point_features(features, params)[0]


def box_size(extent, mode: str = "diagonal") -> float:
    """Scalar box-size summary of a per-axis extent vector."""
    extent = np.asarray(extent, dtype=np.float64)
    if extent.shape != (3,):
        raise ValueError("extent must be a 3-vector")
    if (extent < MIN_EXTENT).any():
        raise ValueError(f"extent axes must all be at least {MIN_EXTENT}")
    if mode == "diagonal":
        return float(np.linalg.norm(extent))
    if mode == "volume":
        return float(extent.prod())
    if mode == "max":
        return float(extent.max())
    raise ValueError(f"unknown box size mode {mode!r}")


def positional_encoding(center, size, params: PositionalEncoderParams) -> Tensor:
    """Normalized linear embedding of [center xyz, box size]."""
    center = np.asarray(center, dtype=np.float64)
    size = np.asarray(size, dtype=np.float64)
    packed = np.concatenate([center, size[..., None]], axis=-1)
    if packed.ndim == 1:
        return norm(linear(Tensor(packed[None]), params.project), params.out_norm)[0]
    return norm(linear(Tensor(packed), params.project), params.out_norm)


def encode_scene(scene, view_set, params: ObjectEncoderParams) -> MultiViewObjectFeatures:
    """Shared point features plus per-view positional encodings for a scene.

    The point encoder runs once over all M objects regardless of the view
    count; per view only the box centers are rotated and re-embedded.
    """
    if not scene.objects:
        raise ValueError("scene has no objects")
    view_set = np.atleast_1d(np.asarray(view_set, dtype=np.float64))
    features = np.stack(
        [invariant_point_features(o.points, o.center) for o in scene.objects]
    )
    shared = encode_point_features(features, params.point)
    centers = np.stack([o.center for o in scene.objects])
    sizes = np.array([box_size(o.extent, params.box_size_mode) for o in scene.objects])

    per_view, rotated_centers = [], []
    for angle in view_set:
        rotated = centers @ rotation_matrix(float(angle)).T
        encoding = positional_encoding(rotated, sizes, params.position)
        per_view.append(ad.add(shared, encoding))
        rotated_centers.append(rotated)
    return MultiViewObjectFeatures(
        shared=shared,
        per_view=ad.stack(per_view, axis=0),
        centers_per_view=np.stack(rotated_centers),
    )
