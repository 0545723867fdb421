"""Adam with bias-corrected moments."""
from __future__ import annotations

import numpy as np


class Adam:
    """Bias-corrected Adam over a fixed list of :class:`Param` objects.

    Moments live in the parameters' dtype; the update is
    ``p -= lr * m_hat / (sqrt(v_hat) + eps)``.
    """

    def __init__(self, params, lr=5e-4, beta1=0.9, beta2=0.99, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g.shape != p.value.shape:
                raise ValueError(f"{p.name}: gradient shape {g.shape} != parameter shape {p.value.shape}")
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            denom = np.sqrt(v / c2)
            denom += self.eps
            p.value -= (self.lr / c1) * m / denom

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def state_arrays(self):
        """Moment buffers in parameter order, for checkpointing."""
        return self.m, self.v

    def load_state(self, m, v, t):
        for dst, src in zip(self.m, m):
            if dst.shape != src.shape:
                raise ValueError("optimizer state does not match parameter shapes")
            dst[...] = src
        for dst, src in zip(self.v, v):
            if dst.shape != src.shape:
                raise ValueError("optimizer state does not match parameter shapes")
            dst[...] = src
        self.t = int(t)


def adam_step(params, grads, state):
    """Functional form: copy ``grads`` into the parameters' buffers and step ``state``."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for p, g in zip(params, grads):
        if p.value.shape != np.shape(g):
            raise ValueError(f"{p.name}: gradient shape {np.shape(g)} != parameter shape {p.value.shape}")
        p.grad[...] = g
    state.step()
