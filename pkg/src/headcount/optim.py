"""Parameter update rules: plain SGD and Adam with bias correction."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class NonFiniteGradient(RuntimeError):
    """A parameter received a NaN or infinite gradient."""


def _checked_grad(p: Tensor):
    g = p.grad
    if g is None:
        return None
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradient(f"non-finite gradient for parameter {p.name or '<unnamed>'}")
    return g


class Sgd:
    """w <- w - lr * g. Parameters with no gradient are left untouched."""

    def __init__(self, params, lr):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = list(params)
        self.lr = float(lr)
        self.step_count = 0

    def step(self):
        for p in self.params:
            g = _checked_grad(p)
            if g is not None:
                p.data -= self.lr * g
        self.step_count += 1

    def zero_grad(self):
        for p in self.params:
            p.grad = None


class Adam:
    """Adam with bias-corrected first/second moments (b1=0.9, b2=0.999)."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.step_count += 1
        t = self.step_count
        for p, m, v in zip(self.params, self._m, self._v):
            g = _checked_grad(p)
            if g is None:
                continue
            m += (1 - self.beta1) * (g - m)
            v += (1 - self.beta2) * (g * g - v)
            mhat = m / (1 - self.beta1 ** t)
            vhat = v / (1 - self.beta2 ** t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


class MaskedAdam(Adam):
    """Adam that touches only entries whose gradient is nonzero this step.

    Shared-weight training updates one sliced sub-network per step; plain
    Adam's moment buffers would keep moving entries outside the active
    slice. Masking both the moment update and the weight update keeps
    inactive entries bit-identical. Bias correction uses the global step
    count, as in the usual sparse-Adam variant.
    """

    def step(self):
        self.step_count += 1
        t = self.step_count
        c1 = 1 - self.beta1 ** t
        c2 = 1 - self.beta2 ** t
        for p, m, v in zip(self.params, self._m, self._v):
            g = _checked_grad(p)
            if g is None:
                continue
            mask = g != 0
            if not mask.any():
                continue
            gm = g[mask]
            m[mask] += (1 - self.beta1) * (gm - m[mask])
            v[mask] += (1 - self.beta2) * (gm * gm - v[mask])
            p.data[mask] -= self.lr * (m[mask] / c1) / (np.sqrt(v[mask] / c2) + self.eps)


def make_optimizer(mode: str, params, lr):
    if mode == "sgd":
        return Sgd(params, lr)
    if mode == "adam":
        return Adam(params, lr)
    if mode == "masked_adam":
        return MaskedAdam(params, lr)
    raise ValueError(f"unknown optimizer mode {mode!r} "
                     "(expected 'sgd', 'adam', or 'masked_adam')")
