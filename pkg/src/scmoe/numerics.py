"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op records its parents and a closure mapping the output gradient to
parent gradients. ``backward`` walks the graph once in reverse topological
order and frees it afterwards, so a second call on the same loss raises.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {' vs '.join(map(str, self.shapes))}")


class GraphError(RuntimeError):
    """Raised for misuse of the autodiff graph (non-scalar loss, freed graph...)."""


class MaskError(ValueError):
    """Raised when an attention/softmax row has no visible position."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_freed", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._freed = False
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None and not self._freed

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.shape[0]

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __pow__(self, exponent: float): return power(self, exponent)
    def __getitem__(self, index): return getitem(self, index)

    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)
    def transpose(self, *axes): return transpose(self, axes if axes else None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``data`` as the output of an op.

    ``backward(g)`` must return one gradient (or None) per parent, each with
    that parent's shape. Nothing is recorded when no parent needs gradients.
    """
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return custom_op(a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return custom_op(a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return custom_op(a.data * b.data, (a, b),
                     lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data
    return custom_op(out, (a, b),
                     lambda g: (_unbroadcast(g / b.data, a.shape),
                                _unbroadcast(-g * out / b.data, b.shape)))


def power(a: Tensor, exponent: float) -> Tensor:
    x = a.data
    return custom_op(x ** exponent, (a,), lambda g: (g * exponent * x ** (exponent - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return custom_op(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return custom_op(np.log(x), (a,), lambda g: (g / x,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return custom_op(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return custom_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    x = a.data
    return custom_op(np.maximum(x, 0.0), (a,), lambda g: (g * (x > 0),))


def swish(a: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    x = a.data
    s = _sigmoid(x)
    return custom_op(x * s, (a,), lambda g: (g * (s + x * s * (1.0 - s)),))


def glu(a: Tensor, axis: int = -1) -> Tensor:
    """Gated linear unit: first half * sigmoid(second half) along ``axis``."""
    n = a.shape[axis]
    if n % 2:
        raise ShapeError("glu", a.shape)
    x1, x2 = np.split(a.data, 2, axis=axis)
    s = _sigmoid(x2)

    def backward(g):
        return (np.concatenate([g * s, g * x1 * s * (1.0 - s)], axis=axis),)

    return custom_op(x1 * s, (a,), backward)


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is True by a constant."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    return custom_op(np.where(mask, value, a.data), (a,), lambda g: (np.where(mask, 0.0, g),))


def dropout(a: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or p <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return custom_op(a.data * keep, (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------- reductions and shape

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return custom_op(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return custom_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return custom_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def getitem(a: Tensor, index) -> Tensor:
    shape = a.shape
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros(shape)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return custom_op(a.data[index], (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return custom_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def scatter_rows(n_rows: int, parts: Sequence[tuple[np.ndarray, Tensor]]) -> Tensor:
    """Assemble an [n_rows, ...] tensor from (row indices, values) parts.

    Rows not covered by any part are zero; parts must not overlap.
    """
    parts = [(np.asarray(r, dtype=np.int64), as_tensor(v)) for r, v in parts]
    if not parts:
        raise ValueError("scatter_rows needs at least one part")
    tail = parts[0][1].shape[1:]
    out = np.zeros((n_rows,) + tail)
    for rows, v in parts:
        if v.shape != (len(rows),) + tail:
            raise ShapeError("scatter_rows", v.shape, (len(rows),) + tail)
        out[rows] = v.data
    return custom_op(out, [v for _, v in parts], lambda g: tuple(g[rows] for rows, _ in parts))


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes (leading axes broadcast)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    A, B = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(B, -1, -2)
        gb = np.swapaxes(A, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return custom_op(A @ B, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None, rowwise: bool = False) -> Tensor:
    """x @ W + b over the last axis of ``x``.

    ``rowwise=True`` uses a kernel whose per-row result does not depend on
    how many other rows are in the batch (bit-stable under row subsetting,
    which BLAS gemm does not promise).
    """
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError("linear", x.shape, weight.shape)
    X, W = x.data, weight.data
    lead = X.shape[:-1]
    X2 = X.reshape(-1, X.shape[-1])
    out = np.einsum("nd,df->nf", X2, W) if rowwise else X2 @ W
    if bias is not None:
        out = out + bias.data
    out = out.reshape(lead + (W.shape[1],))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, W.shape[1])
        grads = [(g2 @ W.T).reshape(X.shape), X2.T @ g2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return custom_op(out, parents, backward)


# ---------------------------------------------------------------- normalisation

def _check_axis(x: np.ndarray, axis: int, op: str):
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError(op, x.shape)


def softmax(a: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-shifted softmax. ``mask`` (True = visible) zeroes hidden entries exactly."""
    x = a.data
    _check_axis(x, axis, "softmax")
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=axis).all():
            raise MaskError("softmax: a row has no visible position")
        x = np.where(mask, x, -np.inf)
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return custom_op(out, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    _check_axis(x, axis, "log_softmax")
    shifted = x - x.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return custom_op(out, (a,), backward)


LAYER_NORM_EPS = 1e-5


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError("layer_norm", x.shape, gamma.shape, beta.shape)
    X = x.data
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    G = gamma.data

    def backward(g):
        lead = tuple(range(X.ndim - 1))
        gx_hat = g * G
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return custom_op(xhat * G + beta.data, (x, gamma, beta), backward)


# ---------------------------------------------------------------- convolution

def depthwise_conv1d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
                     causal: bool = True) -> Tensor:
    """Per-channel 1-D convolution over the time axis of [..., T, D].

    Causal mode left-pads K-1 frames, so output[t] sees x[t-K+1..t] only.
    Symmetric mode needs odd K and pads (K-1)/2 on each side.
    """
    X, Kn = x.data, kernel.data
    K, D = Kn.shape
    if X.shape[-1] != D:
        raise ShapeError("depthwise_conv1d", X.shape, Kn.shape)
    T = X.shape[-2]
    if causal:
        left, right = K - 1, 0
    else:
        if K % 2 == 0:
            raise ShapeError("depthwise_conv1d(symmetric, even K)", Kn.shape)
        left = right = (K - 1) // 2
    pad = [(0, 0)] * (X.ndim - 2) + [(left, right), (0, 0)]
    Xp = np.pad(X, pad)
    out = np.zeros(X.shape)
    for k in range(K):
        out += Xp[..., k:k + T, :] * Kn[k]
    if bias is not None:
        out += bias.data
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        gXp = np.zeros(Xp.shape)
        gK = np.zeros(Kn.shape)
        lead = tuple(range(X.ndim - 1))
        for k in range(K):
            gXp[..., k:k + T, :] += g * Kn[k]
            gK[k] = (g * Xp[..., k:k + T, :]).sum(axis=lead)
        gx = gXp[..., left:left + T, :]
        grads = [gx, gK]
        if bias is not None:
            grads.append(g.sum(axis=lead))
        return tuple(grads)

    return custom_op(out, parents, backward)


# ---------------------------------------------------------------- attention

def masked_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None, heads: int) -> Tensor:
    """Multi-head scaled dot-product attention.

    q: [..., Tq, D], k/v: [..., Tk, D], mask: broadcastable to [..., Tq, Tk]
    with True marking visible keys. Every query row must see at least one key.
    """
    D = q.shape[-1]
    if D % heads or k.shape[-1] != D or v.shape != k.shape:
        raise ShapeError("masked_attention", q.shape, k.shape, v.shape)
    dk = D // heads
    lead = q.shape[:-2]
    Tq, Tk = q.shape[-2], k.shape[-2]
    nl = len(lead)

    def split(t, T):
        t = reshape(t, lead + (T, heads, dk))
        return transpose(t, tuple(range(nl)) + (nl + 1, nl, nl + 2))

    qh, kh, vh = split(q, Tq), split(k, Tk), split(v, Tk)
    scores = matmul(qh, transpose(kh, tuple(range(nl + 1)) + (nl + 2, nl + 1))) * (1.0 / math.sqrt(dk))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.ndim < 2 or mask.shape[-1] != Tk or mask.shape[-2] not in (1, Tq):
            raise ShapeError("masked_attention(mask)", mask.shape, (Tq, Tk))
        if not mask.any(axis=-1).all():
            raise MaskError("masked_attention: a query row has no visible key")
        mask = np.expand_dims(mask, -3)  # broadcast over heads
    attn = softmax(scores, axis=-1, mask=mask)
    ctx = matmul(attn, vh)
    ctx = transpose(ctx, tuple(range(nl)) + (nl + 1, nl, nl + 2))
    return reshape(ctx, lead + (Tq, D))


# ---------------------------------------------------------------- backward

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        if node._freed:
            raise GraphError("graph was freed by an earlier backward; rebuild the forward pass")
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf requiring grad.

    The graph is freed afterwards; calling again on the same loss raises.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._freed:
        raise GraphError("backward already ran on this graph; rebuild the forward pass")
    if not loss.requires_grad:
        raise GraphError("loss is detached: no input requires gradients")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is None:
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            node._freed = True


# ---------------------------------------------------------------- gradient checking

@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    tol: float
    rel_errors: list[np.ndarray] = field(default_factory=list)

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"grad_check {status}: max rel err {self.max_rel_error:.3e} (tol {self.tol:g})"


def grad_check(f: Callable[..., Tensor], inputs: Tensor | Sequence[Tensor], step: float = 1e-5,
               tol: float = 1e-4, floor: float = 1e-6, max_elements: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare autodiff gradients of scalar ``f(*inputs)`` with central differences.

    Relative error per element is |a - n| / max(|a|, |n|, floor). With
    ``max_elements`` only a random subset of each input is probed.
    """
    inputs = [inputs] if isinstance(inputs, Tensor) else list(inputs)
    for t in inputs:
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None
    loss = f(*inputs)
    backward(loss)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros(t.shape) for t in inputs]

    rel_errors = []
    worst = 0.0
    with no_grad():
        for t, a in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_elements is not None and flat.size > max_elements:
                idx = (rng or np.random.default_rng(0)).choice(flat.size, max_elements, replace=False)
            errs = np.zeros(len(idx))
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + step
                fp = f(*inputs).item()
                flat[i] = orig - step
                fm = f(*inputs).item()
                flat[i] = orig
                num = (fp - fm) / (2.0 * step)
                ana = a.reshape(-1)[i]
                errs[j] = abs(ana - num) / max(abs(ana), abs(num), floor)
            rel_errors.append(errs)
            if len(errs):
                worst = max(worst, float(errs.max()))
    return GradCheckReport(passed=worst < tol, max_rel_error=worst, tol=tol, rel_errors=rel_errors)
