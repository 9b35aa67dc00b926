"""Adam and a linear-warmup cosine learning-rate schedule."""

import math

import numpy as np


def warmup_steps(total_steps, warmup_ratio):
    return math.ceil(total_steps * warmup_ratio)


def cosine_lr(step, total_steps, lr_max, warmup_ratio=0.05):
    """Learning rate at ``step`` (0-based) of a ``total_steps`` run.

    Linear ramp from 0 over the warmup steps, then half-cosine decay from
    ``lr_max`` towards 0 at ``total_steps``.
    """
    w = warmup_steps(total_steps, warmup_ratio)
    if step < w:
        return lr_max * step / w
    span = max(total_steps - w, 1)
    progress = min((step - w) / span, 1.0)
    return lr_max * 0.5 * (1.0 + math.cos(math.pi * progress))


class Adam:
    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, grads, lr):
        """Update ``params`` in place for every name present in ``grads``."""
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name in sorted(grads):
            g = grads[name]
            p = self.params[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            p -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)
