"""Tour of the autodiff core: tensors, the tape, gradient checks, Adam.

Run with: python demos/01_tensors_and_gradients.py
"""

import numpy as np

from multiview_grounding import autodiff as ad
from multiview_grounding.autodiff import Tape, Tensor
from multiview_grounding.optim import AdamState, adam_step

rng = np.random.default_rng(0)

# Tensors wrap float64 numpy arrays. Operations run eagerly; while a Tape is
# active they also record how to push gradients backward.
w = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
x = Tensor(rng.standard_normal((4, 3)))

with Tape() as tape:
    hidden = ad.relu(ad.matmul(x, w))
    loss = ad.mean_along(ad.mul(hidden, hidden))
tape.backward(loss)
print("loss:", loss.item())
print("dL/dw:\n", w.grad)

# The analytic gradient agrees with central finite differences.
step = 1e-5
numeric = np.zeros_like(w.data)
for i in range(w.data.size):
    flat = w.data.reshape(-1)
    orig = flat[i]
    for sign in (+1, -1):
        flat[i] = orig + sign * step
        hidden = ad.relu(ad.matmul(x, w))
        value = ad.mean_along(ad.mul(hidden, hidden)).item()
        numeric.reshape(-1)[i] += sign * value / (2 * step)
    flat[i] = orig
print("max |analytic - numeric|:", np.abs(w.grad - numeric).max())

# Adam drives a quadratic toward zero, with bias-corrected moments.
param = np.array([1.0])
state = AdamState(lr=0.1)
trajectory = [param[0]]
for _ in range(30):
    adam_step([param], [2.0 * param.copy()], state)
    trajectory.append(param[0])
print("adam trajectory on f(w) = w^2:", np.round(trajectory[:6], 4), "...",
      round(trajectory[-1], 6))
