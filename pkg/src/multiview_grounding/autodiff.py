"""Dense float64 tensors with tape-based reverse-mode differentiation.

A ``Tensor`` wraps a contiguous numpy float64 array. While a ``Tape`` is
active, every operation that touches a gradient-requiring tensor records a
backward closure on the tape; ``Tape.backward`` replays those closures in
exact reverse execution order, accumulating into ``Tensor.grad``. With no
active tape, operations are plain numpy calls, which is what evaluation
uses.

Execution order is a valid topological order for a define-by-run graph, so
the reverse walk needs no graph search. A tensor consumed by several
operations receives the sum of all consumer contributions.
"""

from __future__ import annotations

import math

import numpy as np

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_CUBIC = 0.044715

# Module-level active tape; one tape per training step, single-threaded.
_ACTIVE_TAPE = None


class Tensor:
    """A dense float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic sugar; the real work is in the module-level ops --

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, (Tensor, np.ndarray)):
            raise TypeError("tensor division is only supported by scalars")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)


def as_tensor(x) -> Tensor:
    """Wrap ``x`` as a constant Tensor unless it already is one."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def parameter(data) -> Tensor:
    """A gradient-requiring tensor (copies its input)."""
    return Tensor(np.array(data, dtype=np.float64, copy=True), requires_grad=True)


class Tape:
    """Ordered record of executed operations for one backward pass.

    Use as a context manager around the forward computation::

        with Tape() as tape:
            loss = model(...)
        tape.backward(loss)
    """

    __slots__ = ("_records",)

    def __init__(self):
        self._records = []

    def __len__(self):
        return len(self._records)

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def record(self, out: Tensor, backward):
        self._records.append((out, backward))

    def backward(self, output: Tensor, seed=None):
        """Accumulate d(output)/d(leaf) into every recorded tensor's grad.

        ``output`` must be scalar unless an explicit ``seed`` gradient of the
        same shape is given.
        """
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is self:
            raise RuntimeError("call backward after exiting the tape context")
        if seed is None:
            if output.data.size != 1:
                raise ValueError("backward without a seed requires a scalar output")
            seed = np.ones_like(output.data)
        else:
            seed = np.asarray(seed, dtype=np.float64)
            if seed.shape != output.data.shape:
                raise ValueError("seed gradient shape must match the output shape")
        _accumulate(output, seed)
        for out, fn in reversed(self._records):
            if out.grad is not None:
                fn(out.grad)


def active_tape():
    return _ACTIVE_TAPE


def _accumulate(t: Tensor, g: np.ndarray, own: bool = False):
    # Copy on first write unless the caller owns ``g`` outright: closures may
    # hand out views of other gradient buffers, and later in-place adds must
    # not corrupt those. Closures that allocate a fresh array pass own=True.
    if t.grad is None:
        t.grad = g if own and g.dtype == np.float64 else np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _record(out: Tensor, backward):
    tape = _ACTIVE_TAPE
    if tape is not None and out.requires_grad:
        tape.record(out, backward)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` to undo numpy broadcasting."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data, a.requires_grad or b.requires_grad)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.shape))

    _record(out, backward)
    return out


def mul(a, b) -> Tensor:
    """Elementwise product; also covers scalar scaling."""
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data, a.requires_grad or b.requires_grad)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape), own=True)
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape), own=True)

    _record(out, backward)
    return out


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(-a.data, a.requires_grad)

    def backward(g):
        _accumulate(a, -g, own=True)

    _record(out, backward)
    return out


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0), a.requires_grad)

    def backward(g):
        _accumulate(a, g * (a.data > 0.0), own=True)

    _record(out, backward)
    return out


def gelu(a) -> Tensor:
    """Gaussian error linear unit (tanh approximation); smooth everywhere."""
    a = as_tensor(a)
    x = a.data
    sq = x * x
    t = np.tanh(_SQRT_2_OVER_PI * (x + _GELU_CUBIC * sq * x))
    out = Tensor(0.5 * x * (1.0 + t), a.requires_grad)

    def backward(g):
        d_inner = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_CUBIC * sq)
        da = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
        _accumulate(a, g * da, own=True)

    _record(out, backward)
    return out


# ---------------------------------------------------------------------------
# linear algebra and shaping


def matmul(a, b) -> Tensor:
    """Matrix product on the last two axes; leading axes broadcast.

    The common stacked-times-2-d case is flattened so BLAS sees one large
    product instead of many small ones.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs 2-d operands, got {a.ndim}-d and {b.ndim}-d")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")

    if b.ndim == 2 and a.ndim > 2:
        k = a.shape[-1]
        flat = a.data.reshape(-1, k)
        out = Tensor(
            (flat @ b.data).reshape(*a.shape[:-1], b.shape[-1]),
            a.requires_grad or b.requires_grad,
        )

        def backward(g):
            g2 = g.reshape(-1, b.shape[-1])
            if a.requires_grad:
                _accumulate(a, (g2 @ b.data.T).reshape(a.shape), own=True)
            if b.requires_grad:
                _accumulate(b, flat.T @ g2, own=True)

        _record(out, backward)
        return out

    out = Tensor(a.data @ b.data, a.requires_grad or b.requires_grad)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g @ b.data.swapaxes(-1, -2), a.shape), own=True)
        if b.requires_grad:
            _accumulate(b, _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.shape), own=True)

    _record(out, backward)
    return out


def affine(x, weight, bias) -> Tensor:
    """Fused ``x @ weight + bias`` over the last axis.

    One tape node instead of two keeps the hot path of every linear layer
    cheap; gradients match the composed ops exactly.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim < 2 or weight.ndim != 2 or bias.ndim != 1:
        raise ValueError("affine expects (..., k) input, (k, n) weight, (n,) bias")
    if x.shape[-1] != weight.shape[0] or bias.shape[0] != weight.shape[1]:
        raise ValueError(f"affine shapes disagree: {x.shape}, {weight.shape}, {bias.shape}")
    flat = x.data.reshape(-1, x.shape[-1])
    out_data = flat @ weight.data
    out_data += bias.data
    out = Tensor(
        out_data.reshape(*x.shape[:-1], weight.shape[1]),
        x.requires_grad or weight.requires_grad or bias.requires_grad,
    )

    def backward(g):
        g2 = g.reshape(-1, weight.shape[1])
        if x.requires_grad:
            _accumulate(x, (g2 @ weight.data.T).reshape(x.shape), own=True)
        if weight.requires_grad:
            _accumulate(weight, flat.T @ g2, own=True)
        if bias.requires_grad:
            _accumulate(bias, g2.sum(axis=0), own=True)

    _record(out, backward)
    return out


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape), a.requires_grad)

    def backward(g):
        _accumulate(a, g.reshape(a.shape))

    _record(out, backward)
    return out


def swapaxes(a, axis1, axis2) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.swapaxes(axis1, axis2), a.requires_grad)

    def backward(g):
        _accumulate(a, g.swapaxes(axis1, axis2))

    _record(out, backward)
    return out


def take(a, key) -> Tensor:
    """Numpy-style indexing/slicing; backward scatter-adds into the source."""
    a = as_tensor(a)
    out = Tensor(a.data[key], a.requires_grad)

    def backward(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, key, g)
        _accumulate(a, buf, own=True)

    _record(out, backward)
    return out


def scatter_rows(values, index, out_shape) -> Tensor:
    """Place ``values`` rows into a zero tensor at ``index`` positions.

    ``index`` is a tuple of integer arrays addressing distinct leading
    positions of ``out_shape``; the inverse of fancy-index gathering.
    """
    values = as_tensor(values)
    out_data = np.zeros(out_shape, dtype=np.float64)
    out_data[index] = values.data
    out = Tensor(out_data, values.requires_grad)

    def backward(g):
        _accumulate(values, g[index], own=True)

    _record(out, backward)
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    """Concatenate along an existing axis."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    out = Tensor(
        np.concatenate([t.data for t in tensors], axis=axis),
        any(t.requires_grad for t in tensors),
    )
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accumulate(t, g[tuple(sl)])

    _record(out, backward)
    return out


def stack(tensors, axis: int = 0) -> Tensor:
    """Stack along a new axis."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("stack needs at least one tensor")
    out = Tensor(
        np.stack([t.data for t in tensors], axis=axis),
        any(t.requires_grad for t in tensors),
    )

    def backward(g):
        slices = np.moveaxis(g, axis, 0)
        for t, gt in zip(tensors, slices):
            if t.requires_grad:
                _accumulate(t, gt)

    _record(out, backward)
    return out


# ---------------------------------------------------------------------------
# reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    return axis % ndim


def sum_along(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), a.requires_grad)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    _record(out, backward)
    return out


def mean_along(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims), a.requires_grad)
    count = a.size if axis is None else a.shape[_norm_axis(axis, a.ndim)]

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape) / count, own=True)

    _record(out, backward)
    return out


def max_along(a, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction; ties split the incoming gradient equally."""
    a = as_tensor(a)
    out_data = a.data.max(axis=axis, keepdims=keepdims)
    out = Tensor(out_data, a.requires_grad)

    def backward(g):
        full = out_data if (keepdims or axis is None) else np.expand_dims(out_data, axis)
        hit = a.data == full
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        scaled = g / hit.sum(axis=axis, keepdims=True)
        _accumulate(a, hit * scaled, own=True)

    _record(out, backward)
    return out


# ---------------------------------------------------------------------------
# neural-net primitives


def softmax(a, axis: int = -1) -> Tensor:
    """Softmax along ``axis``, stabilized by max subtraction."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s, a.requires_grad)

    def backward(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        _accumulate(a, s * (g - dot), own=True)

    _record(out, backward)
    return out


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0.0:
        raise ValueError("layer_norm eps must be positive")
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    if gain.shape != a.shape[-1:] or bias.shape != a.shape[-1:]:
        raise ValueError("layer_norm gain/bias must match the last axis")
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    normed = centered * inv_std
    out = Tensor(normed * gain.data + bias.data, a.requires_grad or gain.requires_grad or bias.requires_grad)
    lead_axes = tuple(range(a.ndim - 1))

    def backward(g):
        if gain.requires_grad:
            _accumulate(gain, (g * normed).sum(axis=lead_axes), own=True)
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=lead_axes), own=True)
        if a.requires_grad:
            gn = g * gain.data
            m1 = gn.mean(axis=-1, keepdims=True)
            m2 = (gn * normed).mean(axis=-1, keepdims=True)
            _accumulate(a, inv_std * (gn - m1 - normed * m2), own=True)

    _record(out, backward)
    return out


def embedding(table, indices) -> Tensor:
    """Row lookup into ``table`` by an integer index array."""
    table = as_tensor(table)
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError("embedding index out of range")
    out = Tensor(table.data[idx], table.requires_grad)

    def backward(g):
        buf = np.zeros_like(table.data)
        np.add.at(buf, idx, g)
        _accumulate(table, buf, own=True)

    _record(out, backward)
    return out


def dropout(a, p: float, rng, training: bool = True) -> Tensor:
    """Inverted dropout; identity when not training or ``p == 0``."""
    a = as_tensor(a)
    if not training or p <= 0.0:
        return a
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout rate must lie in [0, 1)")
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    out = Tensor(a.data * keep, a.requires_grad)

    def backward(g):
        _accumulate(a, g * keep, own=True)

    _record(out, backward)
    return out


def cross_entropy_logits(logits, target) -> Tensor:
    """Negative log-softmax at ``target``.

    For 1-d logits ``target`` is an int and the result is scalar; for
    ``(..., k)`` logits ``target`` is an integer array of the leading shape
    and the result has that shape.
    """
    logits = as_tensor(logits)
    k = logits.shape[-1]
    idx = np.asarray(target)
    if idx.shape != logits.shape[:-1]:
        raise ValueError(f"target shape {idx.shape} does not match logits {logits.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= k):
        raise IndexError("cross-entropy target out of range")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_probs = shifted - lse
    picked = np.take_along_axis(log_probs, idx[..., None], axis=-1)[..., 0]
    out = Tensor(-picked, logits.requires_grad)

    def backward(g):
        grad = np.exp(log_probs)
        if idx.ndim:
            grad[(*np.indices(idx.shape), idx)] -= 1.0
        else:
            grad[idx] -= 1.0
        _accumulate(logits, grad * np.asarray(g)[..., None], own=True)

    _record(out, backward)
    return out
