"""Dense tensors on numpy with tape-based reverse-mode autodiff.

Covers exactly the operator set the conv search space needs: valid 1D
convolution, per-time-step channel normalization, ReLU, global average
pooling, an affine head, softmax losses and KL divergence, plus a few
scalar helpers for composing losses. Default precision is float32;
float64 is used only for gradient verification.
"""

from __future__ import annotations

import threading

import numpy as np

DEFAULT_DTYPE = np.float32
NORM_EPS = 1e-5
LOG_EPS = 1e-12


class GraphError(RuntimeError):
    """Misuse of the recording tape (backward before forward, reuse, ...)."""


class Tensor:
    """A dense numpy array plus gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() requires a scalar tensor")
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def grad_or_zeros(self) -> np.ndarray:
        return self.grad if self.grad is not None else np.zeros_like(self.data)

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"


def parameter(data, name, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name, dtype=dtype)


_ACTIVE = threading.local()


def _current_graph():
    return getattr(_ACTIVE, "graph", None)


class Graph:
    """Records operations in execution order for one forward/backward pass.

    Backward visits recorded nodes in exact reverse order. Parameters that
    were touched by an op but received no gradient end up with exact zeros.
    """

    def __init__(self):
        self._tape = []
        self._produced = set()
        self._params = {}
        self._consumed = False

    def __enter__(self):
        if _current_graph() is not None:
            raise GraphError("tensor graphs do not nest")
        _ACTIVE.graph = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE.graph = None
        return False

    def parameters(self):
        return list(self._params.values())

    def _record(self, out, inputs, fn):
        for t in inputs:
            if t.requires_grad and id(t) not in self._produced:
                self._params.setdefault(id(t), t)
        self._produced.add(id(out))
        self._tape.append((out, fn))

    def backward(self, loss: Tensor):
        if self._consumed:
            raise GraphError("backward already ran on this graph")
        if not self._tape:
            raise GraphError("backward before any recorded forward op")
        if id(loss) not in self._produced:
            raise GraphError("loss tensor was not produced under this graph")
        if loss.data.size != 1:
            raise GraphError("loss must be scalar")
        self._consumed = True
        loss.grad = np.ones_like(loss.data)
        for out, fn in reversed(self._tape):
            if out.grad is not None:
                fn(out.grad)
        for p in self._params.values():
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


def _maybe_record(out, inputs, fn):
    g = _current_graph()
    if g is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        g._record(out, inputs, fn)
    return out


def _as_batched(arr):
    """Promote [C, L] to [1, C, L]; pass [B, C, L] through."""
    if arr.ndim == 2:
        return arr[None], False
    if arr.ndim == 3:
        return arr, True
    raise ValueError(f"expected a [C, L] or [B, C, L] tensor, got shape {arr.shape}")


def _im2col(x, k, stride):
    """Unfold [B, C, L] into [C*k, B*L_out] columns for one matmul."""
    B, C, L = x.shape
    L_out = (L - k) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x, k, axis=2)
    win = win[:, :, ::stride, :][:, :, :L_out, :]
    cols = np.ascontiguousarray(win.transpose(1, 3, 0, 2)).reshape(C * k, B * L_out)
    return cols, L_out


def conv1d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1) -> Tensor:
    """Valid (unpadded) cross-correlation along time.

    x is [C_in, L] or [B, C_in, L]; w is [C_out, C_in, K]; b is [C_out].
    Output length is floor((L - K) / stride) + 1.
    """
    xv, batched = _as_batched(x.data)
    B, C_in, L = xv.shape
    if w.data.ndim != 3:
        raise ValueError(f"conv1d weights must be [C_out, C_in, K], got {w.shape}")
    C_out, C_w, k = w.data.shape
    if C_w != C_in:
        raise ValueError(f"conv1d channel mismatch: input has {C_in}, weights expect {C_w}")
    if b.data.shape != (C_out,):
        raise ValueError(f"conv1d bias must be [{C_out}], got {b.shape}")
    if stride < 1:
        raise ValueError(f"conv1d stride must be >= 1, got {stride}")
    if L < k:
        raise ValueError(f"conv1d input length {L} is shorter than kernel {k}")

    cols, L_out = _im2col(xv, k, stride)
    w2 = np.ascontiguousarray(w.data.reshape(C_out, C_in * k))
    y = (w2 @ cols).reshape(C_out, B, L_out).transpose(1, 0, 2) + b.data[None, :, None]
    out = Tensor(y if batched else y[0])

    def backward_fn(g):
        gv = g if batched else g[None]
        g2 = np.ascontiguousarray(gv.transpose(1, 0, 2)).reshape(C_out, B * L_out)
        if w.requires_grad:
            w._accum((g2 @ cols.T).reshape(C_out, C_in, k))
        if b.requires_grad:
            b._accum(gv.sum(axis=(0, 2)))
        if x.requires_grad:
            dcols = (w2.T @ g2).reshape(C_in, k, B, L_out)
            dx = np.zeros_like(xv)
            for kk in range(k):
                dx[:, :, kk:kk + stride * L_out:stride] += dcols[:, kk].transpose(1, 0, 2)
            x._accum(dx if batched else dx[0])

    return _maybe_record(out, (x, w, b), backward_fn)


def channel_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Normalize each time step to zero mean / unit variance across channels.

    Batch-independent by construction, so sliced sub-networks evaluate from
    shared weights without any statistics recalibration. Zero variance is
    clamped by eps rather than raised.
    """
    xv, batched = _as_batched(x.data)
    C = xv.shape[1]
    if gain.data.shape != (C,) or shift.data.shape != (C,):
        raise ValueError(f"gain/shift must be [{C}], got {gain.shape} and {shift.shape}")
    mu = xv.mean(axis=1, keepdims=True)
    var = xv.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu) * inv
    y = gain.data[None, :, None] * xhat + shift.data[None, :, None]
    out = Tensor(y if batched else y[0])

    def backward_fn(g):
        gv = g if batched else g[None]
        if gain.requires_grad:
            gain._accum((gv * xhat).sum(axis=(0, 2)))
        if shift.requires_grad:
            shift._accum(gv.sum(axis=(0, 2)))
        if x.requires_grad:
            dxhat = gv * gain.data[None, :, None]
            m1 = dxhat.mean(axis=1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
            dx = inv * (dxhat - m1 - xhat * m2)
            x._accum(dx if batched else dx[0])

    return _maybe_record(out, (x, gain, shift), backward_fn)


def rms_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Rescale a whole [C, L] feature map to unit RMS, then per-channel affine.

    Normalizes by one scalar per sample, so temporal amplitude structure
    (the envelope) survives; batch-independent like channel_norm.
    """
    xv, batched = _as_batched(x.data)
    C = xv.shape[1]
    if gain.data.shape != (C,) or shift.data.shape != (C,):
        raise ValueError(f"gain/shift must be [{C}], got {gain.shape} and {shift.shape}")
    m = (xv * xv).mean(axis=(1, 2), keepdims=True)
    inv = 1.0 / np.sqrt(m + eps)
    xhat = xv * inv
    y = gain.data[None, :, None] * xhat + shift.data[None, :, None]
    out = Tensor(y if batched else y[0])

    def backward_fn(g):
        gv = g if batched else g[None]
        if gain.requires_grad:
            gain._accum((gv * xhat).sum(axis=(0, 2)))
        if shift.requires_grad:
            shift._accum(gv.sum(axis=(0, 2)))
        if x.requires_grad:
            gg = gv * gain.data[None, :, None]
            inner = (gg * xhat).mean(axis=(1, 2), keepdims=True)
            dx = inv * (gg - xhat * inner)
            x._accum(dx if batched else dx[0])

    return _maybe_record(out, (x, gain, shift), backward_fn)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0))

    def backward_fn(g):
        if x.requires_grad:
            x._accum(g * (x.data > 0))

    return _maybe_record(out, (x,), backward_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    """Average over time: [C, L] -> [C], or [B, C, L] -> [B, C]."""
    xv, batched = _as_batched(x.data)
    if xv.shape[2] < 1:
        raise ValueError("global_avg_pool needs at least one time step")
    y = xv.mean(axis=2)
    out = Tensor(y if batched else y[0])

    def backward_fn(g):
        gv = g if batched else g[None]
        dx = np.repeat(gv[:, :, None], xv.shape[2], axis=2) / xv.shape[2]
        if x.requires_grad:
            x._accum(dx if batched else dx[0])

    return _maybe_record(out, (x,), backward_fn)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x [C] or [B, C] times w [N, C] plus b [N]."""
    batched = x.data.ndim == 2
    xv = x.data if batched else x.data[None]
    N, C = w.data.shape
    if xv.shape[1] != C:
        raise ValueError(f"affine expects {C} input features, got {xv.shape[1]}")
    y = xv @ w.data.T + b.data[None]
    out = Tensor(y if batched else y[0])

    def backward_fn(g):
        gv = g if batched else g[None]
        if w.requires_grad:
            w._accum(gv.T @ xv)
        if b.requires_grad:
            b._accum(gv.sum(axis=0))
        if x.requires_grad:
            dx = gv @ w.data
            x._accum(dx if batched else dx[0])

    return _maybe_record(out, (x, w, b), backward_fn)


def narrow(x: Tensor, index) -> Tensor:
    """Basic slice of x that routes gradients back into the full tensor."""
    out = Tensor(x.data[index].copy())

    def backward_fn(g):
        if x.requires_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad[index] += g

    return _maybe_record(out, (x,), backward_fn)


def _softmax(z):
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    s = _softmax(x.data)
    out = Tensor(s)

    def backward_fn(g):
        if x.requires_grad:
            inner = (g * s).sum(axis=-1, keepdims=True)
            x._accum(s * (g - inner))

    return _maybe_record(out, (x,), backward_fn)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits).

    logits is [n] with an int label, or [B, n] with an int array of length B;
    the batched form averages over the batch.
    """
    batched = logits.data.ndim == 2
    z = logits.data if batched else logits.data[None]
    y = np.atleast_1d(np.asarray(labels))
    if y.shape != (z.shape[0],):
        raise ValueError(f"expected {z.shape[0]} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        raise ValueError("labels must be integers")
    n = z.shape[1]
    if y.min() < 0 or y.max() >= n:
        raise ValueError(f"label out of range [0, {n})")
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    losses = lse - z[np.arange(z.shape[0]), y]
    out = Tensor(np.asarray(losses.mean(), dtype=z.dtype))

    def backward_fn(g):
        if logits.requires_grad:
            dz = _softmax(z)
            dz[np.arange(z.shape[0]), y] -= 1.0
            dz *= g / z.shape[0]
            logits._accum(dz if batched else dz[0])

    return _maybe_record(out, (logits,), backward_fn)


def _check_distribution(arr, who):
    if np.any(arr < 0):
        raise ValueError(f"{who} has negative entries")
    if np.any(np.abs(arr.sum(axis=-1) - 1.0) > 1e-6):
        raise ValueError(f"{who} rows do not sum to 1 within 1e-6")


def kl_divergence(p: Tensor, q: Tensor) -> Tensor:
    """KL(p || q) for probability vectors; rows averaged in the batched form.

    Zero probabilities contribute zero, and logs are clamped at 1e-12, so
    KL(p || p) is exactly 0 and the result is always >= 0 up to clamping.
    """
    if p.data.shape != q.data.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {q.shape}")
    batched = p.data.ndim == 2
    pv = p.data if batched else p.data[None]
    qv = q.data if batched else q.data[None]
    _check_distribution(pv, "p")
    _check_distribution(qv, "q")
    mask = pv > 0
    terms = np.where(
        mask,
        pv * (np.log(np.maximum(pv, LOG_EPS)) - np.log(np.maximum(qv, LOG_EPS))),
        0.0,
    )
    rows = terms.sum(axis=1)
    out = Tensor(np.asarray(rows.mean(), dtype=pv.dtype))
    B = pv.shape[0]

    def backward_fn(g):
        if q.requires_grad:
            dq = np.where(mask & (qv > LOG_EPS), -pv / np.maximum(qv, LOG_EPS), 0.0)
            dq = dq * (g / B)
            q._accum(dq if batched else dq[0])
        if p.requires_grad:
            dp = np.where(
                mask,
                np.log(np.maximum(pv, LOG_EPS)) - np.log(np.maximum(qv, LOG_EPS)) + 1.0,
                0.0,
            )
            dp = dp * (g / B)
            p._accum(dp if batched else dp[0])

    return _maybe_record(out, (p, q), backward_fn)


def scale(x: Tensor, s: float) -> Tensor:
    out = Tensor(x.data * s)

    def backward_fn(g):
        if x.requires_grad:
            x._accum(g * s)

    return _maybe_record(out, (x,), backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)

    def backward_fn(g):
        if a.requires_grad:
            a._accum(g)
        if b.requires_grad:
            b._accum(g)

    return _maybe_record(out, (a, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data)

    def backward_fn(g):
        if a.requires_grad:
            a._accum(g * b.data)
        if b.requires_grad:
            b._accum(g * a.data)

    return _maybe_record(out, (a, b), backward_fn)


def mean_all(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.mean(), dtype=x.data.dtype))

    def backward_fn(g):
        if x.requires_grad:
            x._accum(np.full_like(x.data, g / x.data.size))

    return _maybe_record(out, (x,), backward_fn)


def check_gradients(build_loss, params, h=1e-5, rtol=1e-4):
    """Compare autodiff gradients against central finite differences.

    build_loss() must rerun the forward pass from the current parameter
    values and return a scalar Tensor. Parameters should be float64 for the
    stated tolerance to be meaningful. Returns the worst relative error.
    """
    with Graph() as g:
        loss = build_loss()
        g.backward(loss)
    grads = [p.grad_or_zeros().copy() for p in params]

    worst = 0.0
    for p, ana in zip(params, grads):
        flat = p.data.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = build_loss().item()
            flat[i] = orig - h
            lo = build_loss().item()
            flat[i] = orig
            num[i] = (hi - lo) / (2 * h)
        num = num.reshape(p.data.shape)
        denom = np.maximum(np.abs(ana) + np.abs(num), 1e-6)
        worst = max(worst, float(np.max(np.abs(ana - num) / denom)))
    return worst
