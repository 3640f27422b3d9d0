"""Dense CPU tensors with reverse-mode automatic differentiation.

Small by design: float32 by default (float64 for numerical checks), numpy
broadcasting on elementwise ops, and a handful of fused ops (layer_norm,
softmax, conv1d, losses) with hand-derived adjoints. A backward pass
consumes the graph; running it twice without a fresh forward is an error.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .errors import WorkbenchError

DEFAULT_DTYPE = np.float32

_nan_checks = False


def set_debug_nan_checks(enabled: bool) -> None:
    """When enabled, every op validates that its output is finite."""
    global _nan_checks
    _nan_checks = bool(enabled)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._vjp = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    def __radd__(self, other):
        return add(_as_tensor(other, self), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """Named trainable tensor carrying Adam moment buffers."""

    __slots__ = ("name", "m", "v")

    def __init__(self, data, name: str, dtype=DEFAULT_DTYPE):
        super().__init__(np.array(data, dtype=dtype), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)


def _as_tensor(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def _make(data, parents, vjp) -> Tensor:
    if _nan_checks and not np.all(np.isfinite(data)):
        raise WorkbenchError("non-finite values produced by an op (debug NaN check)")
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    def vjp(g):
        return (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))
    return _make(a.data * b.data, (a, b), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    def vjp(g):
        da = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        db = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return (da, db)
    return _make(a.data @ b.data, (a, b), vjp)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,),
                 lambda g: (np.transpose(g, inverse),))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    if start < 0 or start + length > a.shape[axis]:
        raise WorkbenchError("narrow out of bounds")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    def vjp(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[index] = g
        return (full,)
    return _make(a.data[index], (a,), vjp)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.data.dtype),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).astype(a.data.dtype),)
    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        n = a.shape[axis] if isinstance(axis, int) else math.prod(a.shape[i] for i in axis)
    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.shape).astype(a.data.dtype),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / n, a.shape).astype(a.data.dtype),)
    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), vjp)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    def vjp(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return ((g * (cdf + x * pdf)).astype(x.dtype),)
    return _make((x * cdf).astype(x.dtype), (a,), vjp)


def sigmoid(a: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-a.data))
    return _make(y.astype(a.data.dtype), (a,), lambda g: ((g * y * (1.0 - y)).astype(a.data.dtype),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    def vjp(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((y * (g - dot)).astype(a.data.dtype),)
    return _make(y.astype(a.data.dtype), (a,), vjp)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - logsum
    def vjp(g):
        return ((g - np.exp(y) * g.sum(axis=axis, keepdims=True)).astype(a.data.dtype),)
    return _make(y.astype(a.data.dtype), (a,), vjp)


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (((g - gm - xhat * gx) * inv).astype(x.dtype),)
    return _make(xhat.astype(x.dtype), (a,), vjp)


def l2_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Rows scaled to unit L2 norm along the last axis; zero rows stay zero."""
    x = a.data
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    safe = np.maximum(norm, eps)
    y = x / safe
    def vjp(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        raw = (g - y * dot) / safe
        return (np.where(norm > eps, raw, g / eps).astype(x.dtype),)
    return _make(y.astype(x.dtype), (a,), vjp)


def philox_rng(key) -> np.random.Generator:
    """Counter-based generator keyed by a tuple of ints (order-sensitive)."""
    words = [0, 0]
    for i, part in enumerate(key):
        mixed = (int(part) + 0x9E3779B97F4A7C15 * (i + 1)) & 0xFFFFFFFFFFFFFFFF
        mixed ^= mixed >> 30
        mixed = (mixed * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
        words[i % 2] ^= mixed
    return np.random.Generator(np.random.Philox(key=np.array(words, dtype=np.uint64)))


def dropout(a: Tensor, p: float, key) -> Tensor:
    """Inverted dropout with a counter-based key (tuple of ints)."""
    if not 0.0 <= p < 1.0:
        raise WorkbenchError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return _make(a.data, (a,), lambda g: (g,))
    keep = (philox_rng(key).random(a.shape) >= p) / (1.0 - p)
    keep = keep.astype(a.data.dtype)
    return _make(a.data * keep, (a,), lambda g: (g * keep,))


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if np.any(ids < 0) or np.any(ids >= table.shape[0]):
        raise WorkbenchError("embedding ids out of range")
    def vjp(g):
        full = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(full, ids, g)
        return (full,)
    return _make(table.data[ids], (table,), vjp)


def conv1d(x: Tensor, w: Tensor, stride: int) -> Tensor:
    """1-D convolution: x (B, Cin, T) with w (Cout, Cin, K), no padding.

    Output length is floor((T - K) / stride) + 1.
    """
    b, c_in, t = x.shape
    c_out, c_in2, k = w.shape
    if c_in != c_in2:
        raise WorkbenchError(f"conv1d channel mismatch: {c_in} vs {c_in2}")
    if t < k:
        raise WorkbenchError(f"conv1d input length {t} shorter than kernel {k}")
    t_out = (t - k) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(x.data, k, axis=2)[:, :, ::stride, :]
    cols = np.ascontiguousarray(windows.transpose(0, 2, 1, 3)).reshape(b * t_out, c_in * k)
    wmat = w.data.reshape(c_out, c_in * k).T
    out = (cols @ wmat).reshape(b, t_out, c_out).transpose(0, 2, 1)

    def vjp(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 1)).reshape(b * t_out, c_out)
        dw = None
        if w.requires_grad:
            dw = (cols.T @ gmat).T.reshape(c_out, c_in, k)
        dx = None
        if x.requires_grad:
            dcols = (gmat @ wmat.T).reshape(b, t_out, c_in, k).transpose(0, 2, 1, 3)
            dx = np.zeros_like(x.data)
            for kk in range(k):
                dx[:, :, kk:kk + stride * t_out:stride] += dcols[:, :, :, kk]
        return (dx, dw)

    return _make(out, (x, w), vjp)


# ---------------------------------------------------------------------------
# losses


def _selection(shape_lead, mask):
    if mask is None:
        sel = np.ones(shape_lead, dtype=bool)
    else:
        sel = np.asarray(mask, dtype=bool)
        if sel.shape != tuple(shape_lead):
            raise WorkbenchError(f"mask shape {sel.shape} does not select positions {shape_lead}")
    n = int(sel.sum())
    if n == 0:
        raise WorkbenchError("loss mask selects no positions")
    return sel, n


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood over selected positions.

    logits: (..., K); targets: integer array over the leading axes; mask:
    optional boolean over the leading axes. Gradients flow only through
    selected positions.
    """
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise WorkbenchError("targets must match logits leading shape")
    sel, n = _selection(logits.shape[:-1], mask)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, targets[..., None].astype(np.int64), axis=-1)[..., 0]
    loss = -picked[sel].mean()

    def vjp(g):
        soft = np.exp(logp)
        d = soft.copy()
        np.put_along_axis(d, targets[..., None].astype(np.int64),
                          np.take_along_axis(d, targets[..., None].astype(np.int64), axis=-1) - 1.0,
                          axis=-1)
        d *= (sel / n)[..., None]
        return ((g * d).astype(logits.data.dtype),)

    return _make(np.asarray(loss, dtype=logits.data.dtype), (logits,), vjp)


def _pointwise_loss(pred: Tensor, target, mask, value_fn, grad_fn):
    target_t = target if isinstance(target, Tensor) else None
    tdata = target.data if target_t is not None else np.asarray(target, dtype=pred.data.dtype)
    if tdata.shape != pred.shape:
        raise WorkbenchError("pred and target shapes differ")
    lead = pred.shape[:-1] if pred.ndim > 1 else pred.shape
    sel, n_pos = _selection(lead, mask)
    sel_full = sel[..., None] if pred.ndim > 1 else sel
    weight = sel_full / (n_pos * (pred.shape[-1] if pred.ndim > 1 else 1))
    diff = pred.data - tdata
    loss = (value_fn(diff) * weight).sum()

    def vjp(g):
        d = (g * grad_fn(diff) * weight).astype(pred.data.dtype)
        return (d, -d if target_t is not None else None)

    parents = (pred, target_t) if target_t is not None else (pred,)
    return _make(np.asarray(loss, dtype=pred.data.dtype), parents, vjp)


def mse(pred: Tensor, target, mask=None) -> Tensor:
    """Mean squared error over selected positions (mean over dims too)."""
    return _pointwise_loss(pred, target, mask, lambda d: d * d, lambda d: 2.0 * d)


def smooth_l1(pred: Tensor, target, beta: float = 1.0, mask=None) -> Tensor:
    """Huber-style loss: quadratic within beta, linear outside."""
    def value(d):
        ad = np.abs(d)
        return np.where(ad < beta, 0.5 * d * d / beta, ad - 0.5 * beta)
    def grad(d):
        return np.clip(d / beta, -1.0, 1.0)
    return _pointwise_loss(pred, target, mask, value, grad)


def bce_with_logits(logits: Tensor, targets, mask=None) -> Tensor:
    """Per-element sigmoid cross-entropy, averaged over selected positions."""
    tdata = np.asarray(targets, dtype=logits.data.dtype)
    if tdata.shape != logits.shape:
        raise WorkbenchError("targets must match logits shape")
    lead = logits.shape[:-1] if logits.ndim > 1 else logits.shape
    sel, n_pos = _selection(lead, mask)
    sel_full = sel[..., None] if logits.ndim > 1 else sel
    weight = sel_full / (n_pos * (logits.shape[-1] if logits.ndim > 1 else 1))
    z = logits.data
    loss = ((np.maximum(z, 0) - z * tdata + np.log1p(np.exp(-np.abs(z)))) * weight).sum()

    def vjp(g):
        sig = 1.0 / (1.0 + np.exp(-z))
        return ((g * (sig - tdata) * weight).astype(z.dtype),)

    return _make(np.asarray(loss, dtype=z.dtype), (logits,), vjp)


# ---------------------------------------------------------------------------
# backward pass and optimizer


class Tape:
    """Topological ordering of the graph reachable from one scalar root."""

    def __init__(self, root: Tensor):
        order, visited = [], set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            if node._consumed:
                raise WorkbenchError("graph already consumed by backward; run forward again")
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        self.order = order

    def run(self) -> None:
        root = self.order[-1]
        grads = {id(root): np.ones_like(root.data)}
        for node in reversed(self.order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                if node.grad is None:
                    node.grad = g.astype(node.data.dtype)
                else:
                    node.grad = node.grad + g
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
            node._consumed = True
            node._vjp = None
            node._parents = ()


def backward(loss: Tensor) -> None:
    """Populate .grad for every reachable leaf from a scalar loss."""
    if loss.data.size != 1:
        raise WorkbenchError("backward requires a scalar loss")
    if not loss.requires_grad:
        raise WorkbenchError("loss does not require grad; nothing to differentiate")
    Tape(loss).run()


def zero_grads(params) -> None:
    for p in params:
        p.grad = np.zeros_like(p.data)


def adam_step(params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
              weight_decay: float = 0.0, step: int = 1) -> None:
    """Bias-corrected Adam with decoupled weight decay, in place."""
    if step < 1:
        raise WorkbenchError("adam step counter starts at 1")
    b1, b2 = betas
    corr1 = 1.0 - b1 ** step
    corr2 = 1.0 - b2 ** step
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        p.m = b1 * p.m + (1.0 - b1) * g
        p.v = b2 * p.v + (1.0 - b2) * (g * g)
        update = (p.m / corr1) / (np.sqrt(p.v / corr2) + eps)
        if weight_decay:
            update = update + weight_decay * p.data
        p.data = (p.data - lr * update).astype(p.data.dtype)
