"""Equal-angle views and the cyclic-closure property behind view robustness.

Run with: python demos/02_view_geometry.py
"""

import math

import numpy as np

from multiview_grounding.geometry import rotation_matrix, rotate_points, view_angles

# N views divide the full turn equally; view 1 is always the input itself.
for n in (1, 2, 4, 8):
    print(f"N={n}: angles =", np.round(view_angles(n), 4))

# Rotations are orthonormal, determinant one, and leave z untouched.
rot = rotation_matrix(math.pi / 2)
print("\nquarter turn of (1,0,0):", rot @ np.array([1.0, 0.0, 0.0]))
print("R R^T == I:", np.allclose(rot @ rot.T, np.eye(3)))

# Cyclic closure: rotating the scene by a grid angle only permutes the set
# of per-view copies. This is the geometric root of view robustness: an
# order-independent reduction over the views cannot see the permutation.
points = np.random.default_rng(1).standard_normal((5, 3))
angles = view_angles(4)
views = [rotate_points(rotation_matrix(a), points) for a in angles]
shifted = [rotate_points(rotation_matrix(a + angles[1]), points) for a in angles]
for j in range(4):
    match = np.abs(shifted[j] - views[(j + 1) % 4]).max()
    print(f"shifted view {j} equals original view {(j + 1) % 4}: max diff {match:.2e}")
