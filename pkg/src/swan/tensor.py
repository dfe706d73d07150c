"""Dense float64 tensors with reverse-mode autodiff on an explicit gradient tape.

Everything the attention models need lives here: a thin Tensor wrapper around
numpy arrays, a Tape that records primitive operations and replays them in
exact reverse order, the attention-specific primitives (masked softmax, layer
norm, windowed max), binary cross entropy, and Adam.

Gradients are only tracked while a Tape is active (``with Tape() as tape:``),
so plain inference runs record nothing.
"""

from __future__ import annotations

import numpy as np

BCE_CLAMP = 1e-7
LAYER_NORM_EPS = 1e-5


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested operation."""


class SpanError(ValueError):
    """Empty or out-of-bounds index span."""


class OptimizerError(RuntimeError):
    """Optimizer invoked on parameters in an invalid state."""


_TAPES: list["Tape"] = []


def _active_tape():
    return _TAPES[-1] if _TAPES else None


class Tape:
    """Ordered record of primitive ops; backward() replays it back-to-front.

    Each entry holds the output tensor, its input tensors, and a closure that
    maps the output gradient to input gradients. A fresh tape per training
    step guarantees no stale contributions leak between steps.
    """

    def __init__(self):
        self._entries = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPES.pop()
        return False

    def __len__(self):
        return len(self._entries)

    def _record(self, out, inputs, grad_fn):
        self._entries.append((out, inputs, grad_fn))

    def backward(self, loss: "Tensor"):
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for out, inputs, grad_fn in reversed(self._entries):
            g = out.grad
            if g is None:
                continue
            for inp, gi in zip(inputs, grad_fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                # accumulation is never in-place, so aliased buffers are safe
                inp.grad = gi if inp.grad is None else inp.grad + gi


class Tensor:
    """A numpy float64 array plus an optional gradient buffer of the same shape."""

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def backward(self):
        if self._tape is None:
            raise RuntimeError("tensor was not recorded on an active tape")
        self._tape.backward(self)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, inputs, grad_fn) -> Tensor:
    """Wrap an op result, recording it on the active tape when grads are needed."""
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape._record(out, inputs, grad_fn)
        out._tape = tape
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's original shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and structural primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul needs (m,k)@(k,n), got {a.shape} @ {b.shape}")
    return _make(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def transpose(a: Tensor) -> Tensor:
    return _make(a.data.T, (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def sum_all(a: Tensor) -> Tensor:
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0
    return _make(np.where(keep, a.data, 0.0), (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# attention primitives


def masked_softmax(logits: Tensor, mask: np.ndarray) -> Tensor:
    """Row-wise softmax restricted to ``mask``; masked entries come out exactly 0.

    Masking is additive minus-infinity before the softmax, so every row with at
    least one unmasked entry sums to 1. Fully masked rows are the defined
    degenerate case and return all zeros rather than NaN.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != logits.shape:
        raise ShapeError(f"mask shape {mask.shape} != logits shape {logits.shape}")
    z = np.where(mask, logits.data, -np.inf)
    zmax = z.max(axis=-1, keepdims=True)
    # fully masked rows: shift by 0 instead of -inf to avoid NaN in exp
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.exp(z - zmax)
    denom = e.sum(axis=-1, keepdims=True)
    y = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)

    def grad_fn(g):
        # dz = y * (g - sum(g*y)); zero rows and masked entries stay zero
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _make(y, (logits,), grad_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then apply the affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"gain/bias must be ({d},), got {gain.shape} and {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    y = xhat * gain.data + bias.data

    def grad_fn(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxhat = g * gain.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return (dx, dgain, dbias)

    return _make(y, (x, gain, bias), grad_fn)


def max_over_steps(x: Tensor, start: int, stop: int) -> Tensor:
    """Per-dimension max over rows [start, stop) of a 2-D tensor.

    The gradient is routed to the argmax row of each dimension, first row on
    ties, which keeps backward deterministic.
    """
    if x.ndim != 2:
        raise ShapeError(f"max_over_steps expects a 2-D tensor, got shape {x.shape}")
    n = x.shape[0]
    if not (0 <= start < stop <= n):
        raise SpanError(f"span [{start}, {stop}) invalid for {n} rows")
    block = x.data[start:stop]
    arg = block.argmax(axis=0) + start
    cols = np.arange(x.shape[1])

    def grad_fn(g):
        gx = np.zeros(x.shape)
        gx[arg, cols] = g
        return (gx,)

    return _make(block.max(axis=0), (x,), grad_fn)


def windowed_max(x: Tensor, spans) -> Tensor:
    """Stacked max_over_steps: one output row per span, zeros for empty spans.

    ``spans`` is a sequence of (start, stop) pairs or None for windows with no
    real steps. Fused into a single tape entry because the models take this
    max over every window of every sample.
    """
    if x.ndim != 2:
        raise ShapeError(f"windowed_max expects a 2-D tensor, got shape {x.shape}")
    n, d = x.shape
    out = np.zeros((len(spans), d))
    args = np.full((len(spans), d), -1, dtype=np.int64)
    for i, span in enumerate(spans):
        if span is None:
            continue
        start, stop = span
        if not (0 <= start < stop <= n):
            raise SpanError(f"span [{start}, {stop}) invalid for {n} rows")
        block = x.data[start:stop]
        out[i] = block.max(axis=0)
        args[i] = block.argmax(axis=0) + start

    def grad_fn(g):
        gx = np.zeros(x.shape)
        rows = args.reshape(-1)
        keep = rows >= 0
        np.add.at(gx, (rows[keep], np.tile(np.arange(d), len(spans))[keep]), g.reshape(-1)[keep])
        return (gx,)

    return _make(out, (x,), grad_fn)


def banded_attention(q: Tensor, k: Tensor, v: Tensor, radius: int, real: np.ndarray,
                     scale: float) -> Tensor:
    """Scaled dot-product attention restricted to |i - j| <= radius.

    Equivalent to ``masked_softmax(q @ k.T * scale, band & padding) @ v`` but
    laid out on an (L, 2*radius+1) band, so the work scales with L*radius
    instead of L^2. Rows outside ``real`` come out all zero.
    """
    if q.ndim != 2 or q.shape != k.shape or q.shape != v.shape:
        raise ShapeError(f"q/k/v must share a 2-D shape, got {q.shape} {k.shape} {v.shape}")
    n, dh = q.shape
    width = 2 * radius + 1
    kp = np.zeros((n + 2 * radius, dh))
    vp = np.zeros((n + 2 * radius, dh))
    kp[radius:radius + n] = k.data
    vp[radius:radius + n] = v.data
    kband = np.lib.stride_tricks.sliding_window_view(kp, width, axis=0)  # (n, dh, width)
    vband = np.lib.stride_tricks.sliding_window_view(vp, width, axis=0)

    cols = np.arange(n)[:, None] + np.arange(width)[None, :] - radius
    valid = (cols >= 0) & (cols < n)
    valid &= real[np.clip(cols, 0, n - 1)] & real[:, None]

    z = np.where(valid, np.einsum("id,idw->iw", q.data, kband) * scale, -np.inf)
    zmax = z.max(axis=1, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.exp(z - zmax)
    denom = e.sum(axis=1, keepdims=True)
    att = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)
    out = np.einsum("iw,idw->id", att, vband)

    def grad_fn(g):
        datt = np.einsum("id,idw->iw", g, vband)
        dz = att * (datt - (datt * att).sum(axis=1, keepdims=True))
        dq = np.einsum("iw,idw->id", dz, kband) * scale
        # scatter the band back: row i's slot w lands on padded row i + w
        dkp = np.zeros_like(kp)
        dvp = np.zeros_like(vp)
        qs = scale * q.data
        for w in range(width):
            dkp[w:w + n] += dz[:, w, None] * qs
            dvp[w:w + n] += att[:, w, None] * g
        return (dq, dkp[radius:radius + n], dvp[radius:radius + n])

    return _make(out, (q, k, v), grad_fn)


def bce_loss(p: Tensor, y) -> Tensor:
    """Mean binary cross entropy; probabilities clamped to [1e-7, 1 - 1e-7]."""
    y = y.data if isinstance(y, Tensor) else np.asarray(y, dtype=np.float64)
    if y.shape != p.shape:
        raise ShapeError(f"labels shape {y.shape} != probabilities shape {p.shape}")
    pc = np.clip(p.data, BCE_CLAMP, 1.0 - BCE_CLAMP)
    loss = -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)).mean()
    inside = (p.data > BCE_CLAMP) & (p.data < 1.0 - BCE_CLAMP)

    def grad_fn(g):
        gp = g * inside * (pc - y) / (pc * (1.0 - pc)) / p.size
        return (gp,)

    return _make(np.asarray(loss), (p,), grad_fn)


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with bias correction over a list of (name, tensor) parameters.

    step() applies the update and then clears every gradient, so each training
    step starts from a clean slate.
    """

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros(p.shape) for _, p in self.params]
        self.v = [np.zeros(p.shape) for _, p in self.params]

    def step(self):
        for name, p in self.params:
            if p.grad is None:
                raise OptimizerError(f"parameter {name!r} has no gradient")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, (_, p) in enumerate(self.params):
            g = p.grad
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            mhat = self.m[i] / (1.0 - b1 ** self.t)
            vhat = self.v[i] / (1.0 - b2 ** self.t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
            p.grad = None


def zero_grads(params):
    for _, p in params:
        p.grad = None
