import numpy as np
import pytest

from multiview_grounding.autodiff import Tape, Tensor


def numeric_gradient(build, arrays, index, step=1e-5):
    """Central-difference gradient of a scalar ``build(*arrays)`` w.r.t. one arg.

    ``build`` receives constant Tensors and must return a scalar Tensor.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    target = arrays[index]
    num = np.zeros_like(target)
    flat, nflat = target.reshape(-1), num.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = float(build(*[Tensor(a) for a in arrays]).data)
        flat[i] = orig - step
        down = float(build(*[Tensor(a) for a in arrays]).data)
        flat[i] = orig
        nflat[i] = (up - down) / (2.0 * step)
    return num


def check_gradients(build, arrays, step=1e-5, tol=1e-4):
    """Assert analytic gradients of ``build`` match central differences.

    Relative error is measured in the max norm against the larger of the two
    gradients, floored to keep near-zero gradients meaningful.
    """
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = build(*tensors)
    tape.backward(out)
    for i, t in enumerate(tensors):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numeric_gradient(build, arrays, i, step=step)
        scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-6)
        err = np.abs(analytic - numeric).max() / scale
        assert err < tol, f"argument {i}: gradient mismatch, relative error {err:.3g}"


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
