"""Dense tensors with reverse-mode automatic differentiation.

A ``Graph`` records every differentiable operation in insertion order while it
is active (``with graph:``). ``backward`` replays the tape in reverse exactly
once, accumulating gradients additively into every tensor on the path from the
root. Graphs are rebuilt per forward pass; nothing is cached between passes.

Arrays keep whatever float dtype they are given: training code uses float32,
gradient-check suites run the same ops in float64.
"""

from __future__ import annotations

import threading
import warnings
from typing import Callable, Optional, Sequence

import numpy as np

EPS_NORM = 1e-12

_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715

_state = threading.local()


def _graph_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = []
        _state.stack = stack
    return stack


def active_graph() -> Optional["Graph"]:
    stack = _graph_stack()
    return stack[-1] if stack else None


class no_grad:
    """Context that suspends recording on whatever graph is active."""

    def __enter__(self):
        _graph_stack().append(None)
        return self

    def __exit__(self, *exc):
        popped = _graph_stack().pop()
        assert popped is None


class Tensor:
    """A dense array plus an optional accumulated gradient."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; all real work happens in the module-level ops.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return smul(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return smul(self, float(other))
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return smul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: Tensor, inputs: tuple, vjp: Callable):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Graph:
    """Tape of recorded operations; insertion order is the topological order."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Graph":
        _graph_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _graph_stack()
        assert stack and stack[-1] is self
        stack.pop()

    def reset(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


def _record(out_data: np.ndarray, inputs: tuple, vjp: Callable) -> Tensor:
    """Wrap an op result, recording it on the active graph when gradients flow."""
    graph = active_graph()
    needs = graph is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        graph.nodes.append(_Node(out, inputs, vjp))
    return out


def backward(root: Tensor, graph: Graph) -> None:
    """Accumulate gradients of a scalar root into every tensor on its tape.

    Gradient transport between recorded nodes uses a private buffer, so
    calling backward twice without zeroing doubles every accumulated grad
    rather than compounding stale values.
    """
    if root.data.size != 1:
        raise ValueError(
            f"backward requires a scalar root, got shape {root.data.shape}"
        )
    flow: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    tensors: dict[int, Tensor] = {id(root): root}
    for node in reversed(graph.nodes):
        g = flow.pop(id(node.out), None)
        if g is None:
            continue
        node.out.accumulate_grad(g)
        grads = node.vjp(g)
        for inp, ig in zip(node.inputs, grads):
            if ig is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in flow:
                flow[key] = flow[key] + ig
            else:
                flow[key] = ig
                tensors[key] = inp
    # Whatever is left in the buffer belongs to leaves (graph inputs).
    for key, g in flow.items():
        tensors[key].accumulate_grad(g)


def zero_grads(tensors: Sequence[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's original shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and linear-algebra primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def vjp(g):
        return (
            _unbroadcast(g, a.data.shape) if a.requires_grad else None,
            _unbroadcast(g, b.data.shape) if b.requires_grad else None,
        )

    return _record(out, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def vjp(g):
        return (
            _unbroadcast(g, a.data.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.data.shape) if b.requires_grad else None,
        )

    return _record(out, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None,
        )

    return _record(out, (a, b), vjp)


def smul(a: Tensor, s: float) -> Tensor:
    out = a.data * s

    def vjp(g):
        return (g * s,)

    return _record(out, (a,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; operands must be 2-D or share identical leading dims."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.ndim != bd.ndim or (
        ad.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]
    ) or ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {ad.shape} x {bd.shape}")
    out = ad @ bd

    def vjp(g):
        ga = g @ bd.swapaxes(-1, -2) if a.requires_grad else None
        gb = ad.swapaxes(-1, -2) @ g if b.requires_grad else None
        return (ga, gb)

    return _record(out, (a, b), vjp)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused x @ w + b for 2-D x; one node instead of a matmul/add pair."""
    xd, wd = x.data, w.data
    if xd.ndim != 2 or wd.ndim != 2 or xd.shape[1] != wd.shape[0]:
        raise ValueError(f"linear shape mismatch: {xd.shape} x {wd.shape}")
    out = xd @ wd
    out += b.data

    def vjp(g):
        gx = g @ wd.T if x.requires_grad else None
        gw = xd.T @ g if w.requires_grad else None
        gb = g.sum(axis=0) if b.requires_grad else None
        return (gx, gw, gb)

    return _record(out, (x, w, b), vjp)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def vjp(g):
        return (g * out,)

    return _record(out, (x,), vjp)


def log(x: Tensor) -> Tensor:
    out = np.log(x.data)

    def vjp(g):
        return (g / x.data,)

    return _record(out, (x,), vjp)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def vjp(g):
        return (g * (x.data > 0),)

    return _record(out, (x,), vjp)


def gelu(x: Tensor) -> Tensor:
    """Gaussian-error-linear unit, tanh form: 0.5x(1 + tanh(c(x + a x^3)))."""
    xd = x.data
    x2 = xd * xd
    inner = x2 * (_GELU_A * _GELU_C)
    inner += _GELU_C
    inner *= xd
    t = np.tanh(inner)
    half_1pt = 0.5 * t
    half_1pt += 0.5
    out = xd * half_1pt

    def vjp(g):
        # d/dx = 0.5(1+t) + 0.5x (1-t^2) c (1 + 3a x^2)
        poly = x2 * (3.0 * _GELU_A)
        poly += 1.0
        poly *= 1.0 - t * t
        poly *= xd
        poly *= 0.5 * _GELU_C
        poly += half_1pt
        poly *= g
        return (poly,)

    return _record(out, (x,), vjp)


def layer_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply learned scale and shift."""
    xhat = x.data - x.data.mean(axis=-1, keepdims=True)
    var = np.einsum("...k,...k->...", xhat, xhat) / xhat.shape[-1]
    inv = 1.0 / np.sqrt(var + eps)[..., None]
    xhat *= inv
    out = xhat * scale.data
    out += shift.data

    def vjp(g):
        gx = None
        if x.requires_grad:
            gh = g * scale.data
            gx = gh - gh.mean(axis=-1, keepdims=True)
            corr = np.einsum("...k,...k->...", gh, xhat) / xhat.shape[-1]
            gx -= xhat * corr[..., None]
            gx *= inv
        k = xhat.shape[-1]
        g2 = g.reshape(-1, k)
        gs = np.einsum("nk,nk->k", g2, xhat.reshape(-1, k)) if scale.requires_grad else None
        gb = g2.sum(axis=0) if shift.requires_grad else None
        return (gx, gs, gb)

    return _record(out, (x, scale, shift), vjp)


def multihead_attention(qkv: Tensor, batch: int, seq: int, heads: int) -> Tensor:
    """Fused scaled-dot-product attention over packed projections.

    qkv is [batch * seq, 3 * d] laid out as (q | k | v); returns the merged
    head outputs [batch * seq, d]. One tape node covers the head split, the
    softmax, and both matmuls, which keeps the backward pass tight.
    """
    three_d = qkv.data.shape[-1]
    d = three_d // 3
    hd = d // heads
    scale = 1.0 / np.sqrt(hd)
    parts = qkv.data.reshape(batch, seq, 3, heads, hd).transpose(2, 0, 3, 1, 4)
    q, k, v = parts[0], parts[1], parts[2]  # [batch, heads, seq, hd]
    att = np.matmul(q, k.swapaxes(-1, -2))
    att *= scale
    att -= att.max(axis=-1, keepdims=True)
    np.exp(att, out=att)
    att /= att.sum(axis=-1, keepdims=True)
    out = np.matmul(att, v)  # [batch, heads, seq, hd]
    merged = out.transpose(0, 2, 1, 3).reshape(batch * seq, d)

    def vjp(g):
        go = g.reshape(batch, seq, heads, hd).transpose(0, 2, 1, 3)
        gatt = np.matmul(go, v.swapaxes(-1, -2))
        gv = np.matmul(att.swapaxes(-1, -2), go)
        gs = att * (gatt - (gatt * att).sum(axis=-1, keepdims=True))
        gs *= scale
        gq = np.matmul(gs, k)
        gk = np.matmul(gs.swapaxes(-1, -2), q)
        gqkv = np.stack([gq, gk, gv]).transpose(1, 3, 0, 2, 4).reshape(batch * seq, three_d)
        return (gqkv,)

    return _record(merged, (qkv,), vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along ``axis`` (max-subtracted)."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _record(out, (x,), vjp)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.data.shape).copy(),)

    return _record(out, (x,), vjp)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.mean(axis=axis, keepdims=keepdims)
    denom = x.data.size if axis is None else x.data.shape[axis]

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / denom, x.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / denom, x.data.shape).copy(),)

    return _record(out, (x,), vjp)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    out = x.data.reshape(shape)

    def vjp(g):
        return (g.reshape(x.data.shape),)

    return _record(out, (x,), vjp)


def transpose(x: Tensor, axes=None) -> Tensor:
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def vjp(g):
        return (np.transpose(g, inv),)

    return _record(out, (x,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        pieces = np.split(g, splits, axis=axis)
        return tuple(
            p if t.requires_grad else None for p, t in zip(pieces, tensors)
        )

    return _record(out, tuple(tensors), vjp)


def slice_(x: Tensor, key) -> Tensor:
    """Basic indexing (ints and slices); gradient scatters back into place."""
    out = x.data[key]

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[key] = g
        return (gx,)

    return _record(np.ascontiguousarray(out), (x,), vjp)


def stop_gradient(x: Tensor) -> Tensor:
    """Same values as ``x`` but detached: contributes zero gradient."""
    return Tensor(x.data.copy())


def l2_normalize(x: Tensor, axis: int = -1, eps: float = EPS_NORM) -> Tensor:
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    clamped = np.maximum(norm, eps)
    out = x.data / clamped

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        live = norm > eps  # below the clamp the denominator is constant
        return ((g - np.where(live, out * dot, 0.0)) / clamped,)

    return _record(out, (x,), vjp)


def cosine_similarity(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """cos(a, b) reduced over ``axis``; zero-norm inputs clamp the denominator."""
    na = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    nb = np.sqrt((b.data * b.data).sum(axis=axis, keepdims=True))
    if np.any(na <= EPS_NORM) or np.any(nb <= EPS_NORM):
        warnings.warn(
            "cosine_similarity received a zero-norm input; denominator clamped",
            RuntimeWarning,
            stacklevel=2,
        )
    ca = np.maximum(na, EPS_NORM)
    cb = np.maximum(nb, EPS_NORM)
    dot = (a.data * b.data).sum(axis=axis, keepdims=True)
    cos = dot / (ca * cb)
    out = np.squeeze(cos, axis=axis)

    def vjp(g):
        gk = np.expand_dims(g, axis)
        ga = gb = None
        if a.requires_grad:
            ga = gk * (b.data / (ca * cb) - np.where(na > EPS_NORM, cos * a.data / (ca * ca), 0.0))
        if b.requires_grad:
            gb = gk * (a.data / (ca * cb) - np.where(nb > EPS_NORM, cos * b.data / (cb * cb), 0.0))
        return (ga, gb)

    return _record(out, (a, b), vjp)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    if logits.data.ndim != 2:
        raise ValueError(f"cross_entropy expects 2-D logits, got {logits.data.shape}")
    labels = np.asarray(labels)
    n, k = logits.data.shape
    bad = (labels < 0) | (labels >= k)
    if bad.any():
        idx = int(np.argmax(bad))
        raise ValueError(
            f"label {int(labels[idx])} at position {idx} outside [0, {k})"
        )
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    picked = z[np.arange(n), labels]
    out = np.asarray((lse - picked).mean(), dtype=logits.data.dtype)

    def vjp(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), labels] -= 1.0
        return (p * (g / n),)

    return _record(out, (logits,), vjp)
