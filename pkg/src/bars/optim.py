"""Adam with decoupled weight decay, and the cosine learning-rate schedule."""

import math

import numpy as np


class Adam:
    """Adam with bias correction; weight decay is decoupled (``p -= lr*wd*p``).

    Parameters whose ``grad`` is ``None`` are treated as having zero gradient.
    """

    def __init__(self, params, lr=3e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            dtype = p.data.dtype.type
            if self.weight_decay:
                p.data -= dtype(self.lr * self.weight_decay) * p.data
            if p.grad is None:
                g = np.zeros_like(p.data)
            else:
                g = p.grad
            m *= dtype(b1)
            m += dtype(1.0 - b1) * g
            v *= dtype(b2)
            v += dtype(1.0 - b2) * g * g
            step = (m / dtype(c1)) / (np.sqrt(v / dtype(c2)) + dtype(self.eps))
            p.data -= dtype(self.lr) * step

    def state_dict(self):
        state = {"t": np.array(self.t), "lr": np.array(self.lr)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            state[f"m{i}"] = m.copy()
            state[f"v{i}"] = v.copy()
        return state

    def load_state_dict(self, state):
        self.t = int(state["t"])
        self.lr = float(state["lr"])
        for i in range(len(self.params)):
            self.m[i][...] = state[f"m{i}"]
            self.v[i][...] = state[f"v{i}"]


def cosine_lr(base_lr, epoch, total_epochs):
    """Cosine annealing from ``base_lr`` at epoch 0 to 0 at ``total_epochs``."""
    if total_epochs <= 0:
        return base_lr
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * min(epoch, total_epochs) / total_epochs))
