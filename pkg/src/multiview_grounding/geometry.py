"""Z-axis rotations and the equal-angle view set.

The grounding model sees a scene under N views obtained by rotating the
scene clockwise about the world z-axis by 2*pi*(j-1)/N for j = 1..N. View 1
is always the untouched input. All functions here are pure numpy; gradients
never flow through geometry.
"""

from __future__ import annotations

import math

import numpy as np


def view_angles(n_views: int) -> np.ndarray:
    """The equal-angle set {2*pi*(j-1)/N : j = 1..N}, in radians."""
    if n_views < 1:
        raise ValueError("the view count must be a positive integer")
    return 2.0 * math.pi * np.arange(n_views, dtype=np.float64) / n_views


def rotation_matrix(angle: float) -> np.ndarray:
    """Clockwise rotation about z by ``angle`` radians, for column vectors.

    Maps (x, y, z) to (x*cos + y*sin, -x*sin + y*cos, z); the z-coordinate is
    untouched.
    """
    if not math.isfinite(angle):
        raise ValueError("rotation angle must be finite")
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])


def rotate_points(rot: np.ndarray, points) -> np.ndarray:
    """Apply a rotation matrix to an (..., 3) array of points."""
    points = np.asarray(points, dtype=np.float64)
    return points @ rot.T


def rotate_center(center, angle: float) -> np.ndarray:
    """Rotate a single xyz coordinate; the per-view box-center transform."""
    return rotate_points(rotation_matrix(angle), np.asarray(center, dtype=np.float64))
