"""Adam optimizer with bias correction.

``adam_step`` is the functional core operating on raw arrays; ``Adam``
wraps named parameter tensors and supports per-name learning-rate scales
(used to train the language encoder at a reduced rate).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


@dataclass
class AdamState:
    """First/second moment buffers plus hyperparameters for one group."""

    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state: AdamState):
    """One in-place Adam update over parallel lists of arrays.

    Moment buffers are allocated lazily on the first call; afterwards the
    shapes are pinned and mismatches raise.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads must have equal length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params):
        raise ValueError("optimizer state does not match the parameter list")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape or m.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return state


class Adam:
    """Adam over named Tensors, with optional per-prefix LR scaling."""

    def __init__(self, named_params, lr: float = 5e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, lr_scales=None):
        self.names = [n for n, _ in named_params]
        self.tensors = [t for _, t in named_params]
        self.scales = np.ones(len(self.names))
        for i, name in enumerate(self.names):
            for prefix, scale in (lr_scales or {}).items():
                if name.startswith(prefix):
                    self.scales[i] = scale
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        self.state.m = [np.zeros_like(t.data) for t in self.tensors]
        self.state.v = [np.zeros_like(t.data) for t in self.tensors]

    def step(self, lr: float | None = None):
        """Apply one update using each tensor's accumulated ``grad``."""
        if lr is not None:
            self.state.lr = lr
        s = self.state
        s.step += 1
        bc1 = 1.0 - s.beta1**s.step
        bc2 = 1.0 - s.beta2**s.step
        for t, m, v, scale in zip(self.tensors, s.m, s.v, self.scales):
            if t.grad is None:
                continue
            g = t.grad
            m *= s.beta1
            m += (1.0 - s.beta1) * g
            v *= s.beta2
            v += (1.0 - s.beta2) * g * g
            t.data -= (s.lr * scale) * (m / bc1) / (np.sqrt(v / bc2) + s.eps)

    def zero_grad(self):
        for t in self.tensors:
            t.grad = None

    def state_tensors(self):
        """Moment buffers as named arrays, for checkpointing."""
        out = {}
        for name, m, v in zip(self.names, self.state.m, self.state.v):
            out[f"optimizer/m/{name}"] = m
            out[f"optimizer/v/{name}"] = v
        return out

    def load_state_tensors(self, tensors: dict, step: int):
        for i, name in enumerate(self.names):
            self.state.m[i] = np.array(tensors[f"optimizer/m/{name}"], copy=True)
            self.state.v[i] = np.array(tensors[f"optimizer/v/{name}"], copy=True)
        self.state.step = step
