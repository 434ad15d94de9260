"""Dense float64 tensors with a define-by-run reverse-mode tape.

Operations record themselves on the innermost active :class:`Tape` when at
least one input requires a gradient. Outside a tape (or inside
:class:`no_grad`) the same functions run as plain numpy arithmetic, which is
what the gradient-free parts of a rollout rely on.

Broadcasting is limited to one rule: in :func:`add` the second operand may
match the trailing dimensions of the first (bias-add over rows). Constant
multipliers go through :func:`mul_const`, which never produces a gradient for
the constant.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_from_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._from_op = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_const(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul_const(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _raise_item(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    """A leaf tensor that accumulates gradients."""
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True)


# --------------------------------------------------------------------------
# tape


class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


_local = threading.local()


def _stack() -> list:
    st = getattr(_local, "stack", None)
    if st is None:
        st = _local.stack = []
    return st


def _active_tape() -> "Tape | None":
    st = _stack()
    return st[-1] if st else None


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; every op executed inside records a node whose
    inputs already exist, so the list is topologically ordered by
    construction.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


class no_grad:
    """Suspend recording on the current thread."""

    def __enter__(self):
        _stack().append(None)
        return self

    def __exit__(self, *exc):
        _stack().pop()


def is_recording() -> bool:
    return _active_tape() is not None


def _record(out: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    tape = _active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return Tensor(out)
    res = Tensor(out, requires_grad=True)
    res._from_op = True
    tape.nodes.append(_Node(inputs, res, backward))
    return res


def backward(tape: Tape, loss: Tensor) -> None:
    """Propagate d(loss)/d(.) to every leaf that requires a gradient.

    Leaf gradients accumulate across calls; call ``zero_grad`` to reset.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._from_op:
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
            elif inp.grad is None:
                inp.grad = np.array(gi, dtype=DTYPE)
            else:
                inp.grad = inp.grad + gi


# --------------------------------------------------------------------------
# stop gradient (with replay support for finite-difference oracles)


class StopGradientReplay:
    """Freeze every stop-gradient value at the first evaluation.

    The first pass records the value produced by each :func:`stop_gradient`
    call in order; after :meth:`freeze`, later passes return the recorded
    values instead. Finite differences taken under a frozen replay therefore
    differentiate the same stopped graph that autodiff sees.
    """

    def __init__(self):
        self.values: list[np.ndarray] = []
        self.frozen = False
        self.cursor = 0

    def __enter__(self):
        _local.replay = self
        return self

    def __exit__(self, *exc):
        _local.replay = None

    def freeze(self) -> None:
        self.frozen = True
        self.cursor = 0

    def rewind(self) -> None:
        self.cursor = 0

    def _next(self, value: np.ndarray) -> np.ndarray:
        if not self.frozen:
            self.values.append(value.copy())
            return value
        if self.cursor >= len(self.values):
            raise RuntimeError("stop-gradient replay diverged: more calls than recorded")
        out = self.values[self.cursor]
        self.cursor += 1
        return out


def stop_gradient(x) -> Tensor:
    """Forward identity that contributes no gradient to its input."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=DTYPE)
    replay = getattr(_local, "replay", None)
    if replay is not None:
        data = replay._next(data)
    return Tensor(data)


def detach(x: Tensor) -> Tensor:
    return stop_gradient(x)


# --------------------------------------------------------------------------
# elementwise


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.shape[a.ndim - b.ndim:] != b.shape:
        raise ShapeError(f"add: {b.shape} does not match trailing dims of {a.shape}")
    sb = b.shape
    return _record(a.data + b.data, (a, b), lambda g: (g, _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.shape[a.ndim - b.ndim:] != b.shape:
        raise ShapeError(f"sub: {b.shape} does not match trailing dims of {a.shape}")
    sb = b.shape
    return _record(a.data - b.data, (a, b), lambda g: (g, -_unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def mul_const(x: Tensor, c) -> Tensor:
    """Multiply by a constant scalar or array broadcastable to ``x``."""
    c = np.asarray(c, dtype=DTYPE)
    out = x.data * c
    if out.shape != x.shape:
        raise ShapeError(f"mul_const: constant {c.shape} would broadcast {x.shape} to {out.shape}")
    return _record(out, (x,), lambda g: (g * c,))


def square(x: Tensor) -> Tensor:
    d = x.data
    return _record(d * d, (x,), lambda g: (2.0 * g * d,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _record(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    d = x.data
    return _record(np.log(d), (x,), lambda g: (g / d,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _record(out, (x,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return _record(out, (x,), lambda g: (g * out * (1.0 - out),))


def silu(x: Tensor) -> Tensor:
    d = x.data
    s = _sigmoid(d)
    return _record(d * s, (x,), lambda g: (g * (s + d * s * (1.0 - s)),))


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), computed without overflow."""
    d = x.data
    out = np.logaddexp(0.0, d)
    return _record(out, (x,), lambda g: (g * _sigmoid(d),))


def log_sigmoid(x: Tensor) -> Tensor:
    return mul_const(softplus(mul_const(x, -1.0)), -1.0)


# --------------------------------------------------------------------------
# reductions and shape ops


def sum_(x: Tensor, axis=None) -> Tensor:
    shape = x.shape
    out = x.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _record(np.asarray(out), (x,), bw)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul_const(sum_(x, axis), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return _record(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),))


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    return swapaxes(x, -1, -2)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _record(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def take(x: Tensor, index) -> Tensor:
    """Basic (slice/int) indexing."""
    shape = x.shape
    out = x.data[index]

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[index] = g
        return (full,)

    return _record(np.array(out), (x,), bw)


def gather(table: Tensor, idx) -> Tensor:
    """Row lookup ``table[idx]``; gradients scatter-add back into the table."""
    idx = np.asarray(idx, dtype=np.intp)
    shape = table.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, *shape[1:]))
        return (full,)

    return _record(table.data[idx], (table,), bw)


# --------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for a (..., m, k) and b (k, n) or matching (..., k, n)."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _record(ad @ bd, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    d = x.data
    if np.isnan(d).any():
        raise ValueError("softmax_rows: NaN input")
    e = np.exp(d - d.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)
    return _record(p, (x,), lambda g: (p * (g - (g * p).sum(axis=-1, keepdims=True)),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = xc * inv
    gd = gain.data
    n = d.shape[-1]

    def bw(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xh * (gx_hat * xh).mean(axis=-1, keepdims=True))
        flat = g.reshape(-1, n)
        return gx, (flat * xh.reshape(-1, n)).sum(axis=0), flat.sum(axis=0)

    return _record(xh * gd + bias.data, (x, gain, bias), bw)


def masked_attention(q: Tensor, k: Tensor, v: Tensor, mask=None, heads: int = 1,
                     bias: Tensor | None = None) -> Tensor:
    """Scaled dot-product attention with a boolean keep-mask.

    q is (..., Sq, D); k and v are (..., Sk, D) with D split into ``heads``.
    ``mask`` is an (Sq, Sk) boolean matrix (True = may attend); disallowed
    logits become -inf before the softmax. ``bias`` is an optional additive
    logit term of shape (Sq, Sk, heads), shared across the batch.
    """
    if q.shape[-1] != k.shape[-1] or k.shape != v.shape:
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape}")
    *lead, sq, dm = q.shape
    sk = k.shape[-2]
    if dm % heads:
        raise ShapeError(f"attention: width {dm} not divisible by {heads} heads")
    dh = dm // heads
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (sq, sk):
            raise ShapeError(f"attention: mask {mask.shape} vs logits {(sq, sk)}")
        if not mask.any(axis=-1).all():
            raise ValueError("attention: a query row has every key masked")
    scale = 1.0 / np.sqrt(dh)

    def split(t):  # (..., S, D) -> (..., H, S, dh)
        return np.swapaxes(t.reshape(*t.shape[:-1], heads, dh), -2, -3)

    qh, kh, vh = split(q.data), split(k.data), split(v.data)
    logits = (qh @ np.swapaxes(kh, -1, -2)) * scale
    if bias is not None:
        logits = logits + np.moveaxis(bias.data, -1, 0)
    if mask is not None:
        logits = np.where(mask, logits, -np.inf)
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)
    oh = p @ vh
    out = np.swapaxes(oh, -2, -3).reshape(*lead, sq, dm)

    def bw(g):
        gh = split(g)
        gv = np.swapaxes(p, -1, -2) @ gh
        gp = gh @ np.swapaxes(vh, -1, -2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True))
        gq = (gs @ kh) * scale
        gk = (np.swapaxes(gs, -1, -2) @ qh) * scale

        def merge(t, s):
            return np.swapaxes(t, -2, -3).reshape(*lead, s, dm)

        gb = None
        if bias is not None:
            gb = np.moveaxis(gs.reshape(-1, heads, sq, sk).sum(axis=0), 0, -1)
        return merge(gq, sq), merge(gk, sk), merge(gv, sk), gb

    inputs = (q, k, v) if bias is None else (q, k, v, bias)
    return _record(out, inputs, bw)


# --------------------------------------------------------------------------
# verification


def grad_check(f: Callable[[], Tensor], params: dict[str, Tensor], step: float = 1e-4,
               coords: Iterable[tuple[str, tuple]] | None = None, stencil: int = 5) -> float:
    """Worst relative error between autodiff and central finite differences.

    ``f`` evaluates a scalar loss from the current values in ``params`` and
    must be deterministic. Stop-gradient values are frozen at the base point,
    so the finite differences see the same stopped graph as autodiff.
    ``stencil`` picks the 3-point (h^2) or 5-point (h^4) central formula.
    Relative error uses the denominator max(|analytic|, |numeric|, 1e-8).
    """
    if not 0.0 < step <= 1e-3:
        raise ValueError(f"grad_check: step must lie in (0, 1e-3], got {step}")
    if stencil not in (3, 5):
        raise ValueError("grad_check: stencil must be 3 or 5")
    # symmetric pairs are differenced before weighting, so a flat f gives exactly 0
    offsets, weights = ((1,), (0.5,)) if stencil == 3 else ((1, 2), (8 / 12, -1 / 12))
    with StopGradientReplay() as replay:
        for p in params.values():
            p.zero_grad()
        with Tape() as tape:
            loss = f()
        backward(tape, loss)
        replay.freeze()
        if coords is None:
            coords = [(name, idx) for name, p in params.items() for idx in np.ndindex(p.shape)]
        worst = 0.0
        for name, idx in coords:
            p = params[name]
            orig = p.data[idx]
            numeric = 0.0
            for k, w in zip(offsets, weights):
                pair = []
                for sign in (1.0, -1.0):
                    p.data[idx] = orig + sign * k * step
                    replay.rewind()
                    with no_grad():
                        val = f().item()
                    if not np.isfinite(val):
                        p.data[idx] = orig
                        raise ValueError(f"grad_check: non-finite loss at {name}{idx}")
                    pair.append(val)
                numeric += w * (pair[0] - pair[1])
            p.data[idx] = orig
            numeric /= step
            analytic = 0.0 if p.grad is None else float(p.grad[idx])
            denom = max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst
