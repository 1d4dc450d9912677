"""Finite-difference verification of every differentiable operator.

Runs in 64-bit mode with central differences (h = 1e-5) and reports the
worst relative error per operator over randomized shapes. Shared by the
CLI `gradcheck` command and the acceptance suite.
"""

from __future__ import annotations

import numpy as np

from . import distill as D
from . import tensor as T


def _case_conv1d(rng):
    c_in = int(rng.integers(1, 4))
    c_out = int(rng.integers(1, 5))
    k = int(rng.integers(1, 6))
    stride = int(rng.integers(1, 4))
    L = int(rng.integers(k, k + 14))
    x = T.parameter(rng.normal(size=(c_in, L)), "x", dtype=np.float64)
    w = T.parameter(rng.normal(size=(c_out, c_in, k)) * 0.5, "w", dtype=np.float64)
    b = T.parameter(rng.normal(size=c_out) * 0.2, "b", dtype=np.float64)
    return [x, w, b], lambda: T.mean_all(T.conv1d(x, w, b, stride))


def _case_channel_norm(rng):
    c = int(rng.integers(2, 7))
    L = int(rng.integers(2, 9))
    x = T.parameter(rng.normal(size=(c, L)), "x", dtype=np.float64)
    gain = T.parameter(rng.normal(size=c), "gain", dtype=np.float64)
    shift = T.parameter(rng.normal(size=c), "shift", dtype=np.float64)
    return [x, gain, shift], lambda: T.mean_all(T.channel_norm(x, gain, shift))


def _case_rms_norm(rng):
    c = int(rng.integers(2, 7))
    L = int(rng.integers(2, 9))
    x = T.parameter(rng.normal(size=(c, L)), "x", dtype=np.float64)
    gain = T.parameter(rng.normal(size=c), "gain", dtype=np.float64)
    shift = T.parameter(rng.normal(size=c), "shift", dtype=np.float64)
    mix = T.Tensor(rng.normal(size=(c, L)), dtype=np.float64)
    return [x, gain, shift], lambda: T.mean_all(T.mul(T.rms_norm(x, gain, shift), mix))


def _case_relu(rng):
    n = int(rng.integers(3, 12))
    vals = rng.normal(size=n)
    vals += np.sign(vals) * 0.05  # keep away from the kink
    x = T.parameter(vals, "x", dtype=np.float64)
    w = T.parameter(rng.normal(size=n), "w", dtype=np.float64)
    return [x, w], lambda: T.mean_all(T.mul(T.relu(x), w))


def _case_pool(rng):
    c = int(rng.integers(1, 5))
    L = int(rng.integers(1, 9))
    x = T.parameter(rng.normal(size=(c, L)), "x", dtype=np.float64)
    w = T.parameter(rng.normal(size=c), "w", dtype=np.float64)
    return [x, w], lambda: T.mean_all(T.mul(T.global_avg_pool(x), w))


def _case_affine(rng):
    c = int(rng.integers(2, 7))
    n = int(rng.integers(2, 6))
    x = T.parameter(rng.normal(size=c), "x", dtype=np.float64)
    w = T.parameter(rng.normal(size=(n, c)), "w", dtype=np.float64)
    b = T.parameter(rng.normal(size=n), "b", dtype=np.float64)
    return [x, w, b], lambda: T.mean_all(T.affine(x, w, b))


def _case_softmax(rng):
    n = int(rng.integers(2, 8))
    x = T.parameter(rng.normal(size=n), "x", dtype=np.float64)
    w = T.parameter(rng.normal(size=n), "w", dtype=np.float64)
    return [x, w], lambda: T.mean_all(T.mul(T.softmax(x), w))


def _case_cross_entropy(rng):
    b = int(rng.integers(1, 5))
    n = int(rng.integers(2, 7))
    x = T.parameter(rng.normal(size=(b, n)), "x", dtype=np.float64)
    labels = rng.integers(0, n, size=b)
    return [x], lambda: T.softmax_cross_entropy(x, labels)


def _case_kl(rng):
    n = int(rng.integers(2, 7))
    p = rng.dirichlet(np.full(n, 2.0))
    logits = T.parameter(rng.normal(size=n), "logits", dtype=np.float64)
    pt = T.Tensor(p)
    return [logits], lambda: T.kl_divergence(pt, T.softmax(logits))


def _case_kd_loss(rng):
    b = int(rng.integers(1, 4))
    student = T.parameter(rng.normal(size=(b, 6)), "student", dtype=np.float64)
    teacher = rng.normal(size=(b, 6))
    labels = rng.integers(0, 6, size=b)
    cfg = D.KdConfig(tau=0.0, temperature=float(rng.uniform(1.0, 5.0)),
                     alpha=float(rng.uniform(0.1, 0.9)))
    return [student], lambda: D.kd_loss(student, teacher, labels, cfg)


def _case_full_chain(rng):
    c_mid = int(rng.integers(2, 5))
    k = int(rng.integers(2, 4))
    L = int(rng.integers(k + 4, k + 12))
    x = T.Tensor(rng.normal(size=(1, L)), dtype=np.float64)
    w = T.parameter(rng.normal(size=(c_mid, 1, k)) * 0.7, "w", dtype=np.float64)
    b = T.parameter(rng.normal(size=c_mid) * 0.1, "b", dtype=np.float64)
    gain = T.parameter(np.ones(c_mid) + 0.1 * rng.normal(size=c_mid), "gain",
                       dtype=np.float64)
    shift = T.parameter(0.1 * rng.normal(size=c_mid), "shift", dtype=np.float64)
    hw = T.parameter(rng.normal(size=(6, c_mid)) * 0.5, "hw", dtype=np.float64)
    hb = T.parameter(np.zeros(6), "hb", dtype=np.float64)
    label = int(rng.integers(6))

    def build():
        h = T.conv1d(x, w, b, stride=1)
        h = T.channel_norm(h, gain, shift)
        h = T.relu(h)
        return T.softmax_cross_entropy(T.affine(T.global_avg_pool(h), hw, hb), label)

    return [w, b, gain, shift, hw, hb], build


OPERATOR_CASES = {
    "conv1d": _case_conv1d,
    "channel_norm": _case_channel_norm,
    "rms_norm": _case_rms_norm,
    "relu": _case_relu,
    "global_avg_pool": _case_pool,
    "affine_head": _case_affine,
    "softmax": _case_softmax,
    "softmax_cross_entropy": _case_cross_entropy,
    "kl_divergence": _case_kl,
    "kd_loss": _case_kd_loss,
    "conv_norm_relu_pool_head_chain": _case_full_chain,
}


def run_gradient_suite(cases: int = 20, seed: int = 0,
                       rtol: float = 1e-4) -> list[tuple[str, float, bool]]:
    """(operator, worst relative error, passed) per operator."""
    results = []
    for name, factory in OPERATOR_CASES.items():
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(cases):
            params, build = factory(rng)
            worst = max(worst, T.check_gradients(build, params))
        results.append((name, worst, worst < rtol))
    return results
