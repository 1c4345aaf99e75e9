"""Learning-rate schedule, optimizers, and the one-call loss/gradient helper."""
import math

import numpy as np

from ..diffcore import Graph, backward
from ..errors import ContractViolation


def warmup_steps(total, warmup=0.06):
    if not 0.0 <= warmup < 1.0:
        raise ContractViolation(f"warmup fraction must lie in [0, 1), got {warmup}")
    return int(math.floor(warmup * total + 0.5))


def triangular_lr(step, total, peak, warmup=0.06):
    """Linear rise from 0 to ``peak`` over the warmup, then linear decay to 0 at ``total``."""
    w = warmup_steps(total, warmup)
    if total <= 0:
        return 0.0
    if step <= w:
        return peak if w == 0 else peak * step / w
    return peak * max(0, total - step) / (total - w)


def loss_and_grads(store, fn, names=None):
    """Evaluate ``fn(params)`` on a fresh graph; returns ``(loss, {name: array})``."""
    g = Graph()
    with g:
        p = g.bind(store.entries)
        loss = fn(p)
    grads = backward(g, loss, names or list(store.entries))
    return float(loss.data), {k: v.data for k, v in grads.items()}


def grad_norm(grads):
    return math.sqrt(sum(float(np.sum(v * v)) for v in grads.values()))


def clip_grads(grads, max_norm):
    if not max_norm:
        return grads
    n = grad_norm(grads)
    if n <= max_norm:
        return grads
    return {k: v * (max_norm / n) for k, v in grads.items()}


def all_finite(grads):
    return all(np.all(np.isfinite(v)) for v in grads.values())


class SGD:
    def step(self, store, grads, lr):
        for k, g in grads.items():
            store[k] = store[k] - lr * g


class Adam:
    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, store, grads, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for k, g in grads.items():
            m = self.m.get(k, 0.0) * b1 + (1 - b1) * g
            v = self.v.get(k, 0.0) * b2 + (1 - b2) * g * g
            self.m[k], self.v[k] = m, v
            store[k] = store[k] - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(name):
    if name == "sgd":
        return SGD()
    if name == "adam":
        return Adam()
    raise ContractViolation(f"unknown optimizer {name!r}")
