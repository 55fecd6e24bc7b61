"""Adam over named parameter tensors."""

import numpy as np

from .errors import InvalidArgumentError
from .tensor import Tensor


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, clip_norm: float | None = 5.0):
        if lr <= 0:
            raise InvalidArgumentError(f"learning rate must be positive, got {lr}")
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {name: np.zeros(p.shape) for name, p in params.items()}
        self.v = {name: np.zeros(p.shape) for name, p in params.items()}

    def step(self, grads: dict[Tensor, np.ndarray]):
        """Apply one update. Parameters are replaced, never mutated in place."""
        self.t += 1
        named = {name: grads[p] for name, p in self.params.items() if p in grads}
        if self.clip_norm is not None and named:
            total = float(np.sqrt(np.sum([np.sum(g * g) for g in named.values()])))
            if total > self.clip_norm:
                named = {name: g * (self.clip_norm / total) for name, g in named.items()}
        for name, g in named.items():
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            m_hat = self.m[name] / (1 - self.beta1 ** self.t)
            v_hat = self.v[name] / (1 - self.beta2 ** self.t)
            old = self.params[name]
            self.params[name] = Tensor(old.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps),
                                       requires_grad=True, name=name)
        return self.params
