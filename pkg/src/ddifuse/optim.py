"""Minimal in-place optimizers over dicts of numpy arrays."""

from __future__ import annotations

import numpy as np


class SGD:
    """Plain SGD with L2 weight decay added to the gradient (torch semantics)."""

    def __init__(self, params: dict, lr: float, weight_decay: float = 0.0, frozen=()):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.frozen = set(frozen)

    def step(self, grads: dict) -> None:
        for name, g in grads.items():
            if name in self.frozen:
                continue
            p = self.params[name]
            if self.weight_decay:
                g = g + self.weight_decay * p
            p -= self.lr * g


class Adam:
    def __init__(self, params: dict, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, frozen=()):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.frozen = set(frozen)
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, g in grads.items():
            if name in self.frozen:
                continue
            p = self.params[name]
            if self.weight_decay:
                g = g + self.weight_decay * p
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(name: str, params: dict, lr: float, weight_decay: float = 0.0, frozen=()):
    name = name.lower()
    if name == "sgd":
        return SGD(params, lr, weight_decay, frozen)
    if name == "adam":
        return Adam(params, lr, weight_decay=weight_decay, frozen=frozen)
    raise ValueError(f"unknown optimizer {name!r}")


def minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]
