"""Forward primitives and their backward rules.

Every primitive checks input shapes, computes its output with numpy, rejects
non-finite results, and records a graph node when any input needs a gradient.
Reductions inside softmax, normalization and the losses accumulate in float64.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from e4srec.autodiff.tensor import Tensor, as_tensor, is_eval_mode, is_grad_enabled
from e4srec.errors import DimensionError, NumericError

PRIMITIVES = (
    "matmul", "add", "mul", "linear", "embedding_lookup", "softmax",
    "cross_entropy_with_logits", "causal_multihead_attention", "rms_norm",
    "layer_norm", "silu", "gelu", "dropout", "concat", "slice",
)


def _dims_error(op: str, *shapes, detail: str = "") -> DimensionError:
    shown = ", ".join(str(tuple(s)) for s in shapes)
    msg = f"{op}: incompatible shapes {shown}"
    return DimensionError(f"{msg}: {detail}" if detail else msg)


def _result(op: str, data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op}: produced non-finite values")
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward
    out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise _dims_error("add", a.shape, b.shape) from None

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result("add", data, (a, b), backward)


def sub(a, b) -> Tensor:
    return add(a, mul(b, -1.0))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = b

        def backward_scalar(g):
            return (g * c,)

        return _result("mul", (a.data * c).astype(a.data.dtype), (a,), backward_scalar)
    try:
        data = a.data * b.data
    except ValueError:
        raise _dims_error("mul", a.shape, b.shape) from None

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result("mul", data, (a, b), backward)


def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))

    def backward(g):
        return (g * (sig * (1.0 + x.data * (1.0 - sig))),)

    return _result("silu", x.data * sig, (x,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x2 = x.data * x.data
    t = np.tanh(_GELU_C * x.data * (1.0 + 0.044715 * x2))

    def backward(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du),)

    return _result("gelu", 0.5 * x.data * (1.0 + t), (x,), backward)


def log_sigmoid(x: Tensor) -> Tensor:
    xd = x.data.astype(np.float64)
    data = -np.logaddexp(0.0, -xd)

    def backward(g):
        return (g * (1.0 / (1.0 + np.exp(xd))).astype(x.data.dtype),)

    return _result("log_sigmoid", data.astype(x.data.dtype), (x,), backward)


class DropoutRNG:
    """Counter-based mask source: the n-th mask depends only on (seed, n)."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.counter = 0

    def uniform(self, shape) -> np.ndarray:
        bitgen = np.random.Philox(key=self.seed, counter=self.counter)
        self.counter += 1
        return np.random.Generator(bitgen).random(shape, dtype=np.float32)


def dropout(x: Tensor, p: float, rng: DropoutRNG | None) -> Tensor:
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: p must be in [0, 1), got {p}")
    if p == 0.0 or is_eval_mode() or rng is None:
        return x
    keep = (rng.uniform(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)

    def backward(g):
        return (g * keep,)

    return _result("dropout", x.data * keep, (x,), backward)


# linear algebra --------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise _dims_error("matmul", a.shape, b.shape)
    try:
        data = np.matmul(a.data, b.data)
    except ValueError:
        raise _dims_error("matmul", a.shape, b.shape) from None

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _result("matmul", data, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with weight stored (d_in, d_out)."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise _dims_error("linear", x.shape, weight.shape)
    if bias is not None and bias.shape != (weight.shape[1],):
        raise _dims_error("linear", x.shape, weight.shape, bias.shape)
    data = x.data @ weight.data
    if bias is not None:
        data = data + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = None
        if weight.requires_grad:
            gw = x.data.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        if bias is None:
            return gx, gw
        return gx, gw, g.reshape(-1, g.shape[-1]).sum(axis=0)

    return _result("linear", data, parents, backward)


def embedding_lookup(table: Tensor, indices) -> Tensor:
    idx = np.asarray(indices)
    if table.ndim != 2:
        raise _dims_error("embedding_lookup", table.shape, idx.shape, detail="table must be 2-D")
    if not np.issubdtype(idx.dtype, np.integer):
        raise _dims_error("embedding_lookup", table.shape, idx.shape, detail="indices must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise _dims_error("embedding_lookup", table.shape, idx.shape, detail="index out of range")

    def backward(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (grad,)

    return _result("embedding_lookup", table.data[idx], (table,), backward)


# shape ops -----------------------------------------------------------------

def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise _dims_error("concat", *(t.shape for t in tensors)) from None
    ax = axis % data.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=ax) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _result("concat", data, tensors, backward)


def slice(x: Tensor, index) -> Tensor:
    """Basic or integer-array indexing (numpy semantics)."""
    try:
        data = x.data[index]
    except IndexError:
        raise _dims_error("slice", x.shape, detail=f"bad index {index!r}") from None

    def backward(g):
        grad = np.zeros_like(x.data)
        np.add.at(grad, index, g)
        return (grad,)

    return _result("slice", np.array(data, copy=True), (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise _dims_error("reshape", x.shape, tuple(shape)) from None

    def backward(g):
        return (g.reshape(x.shape),)

    return _result("reshape", data, (x,), backward)


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _result("transpose", np.transpose(x.data, axes), (x,), backward)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    data = x.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.data.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.data.dtype),)

    return _result("sum", np.asarray(data), (x,), backward)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis), 1.0 / n)


# normalization / probability -------------------------------------------------

_F64 = np.float64


def _rowsum(a: np.ndarray, axis: int = -1) -> np.ndarray:
    return a.sum(axis=axis, keepdims=True, dtype=_F64).astype(a.dtype)


def _rowmean(a: np.ndarray) -> np.ndarray:
    return a.mean(axis=-1, keepdims=True, dtype=_F64).astype(a.dtype)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / _rowsum(e, axis)

    def backward(g):
        return (p * (g - _rowsum(g * p, axis)),)

    return _result("softmax", p, (x,), backward)


def cross_entropy_with_logits(logits: Tensor, targets, ignore_index: int = -1) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under softmax(logits).

    ``logits`` is (..., N); ``targets`` has the leading shape. Entries equal to
    ``ignore_index`` are excluded from the mean.
    """
    t = np.asarray(targets)
    if logits.shape[:-1] != t.shape:
        raise _dims_error("cross_entropy_with_logits", logits.shape, t.shape)
    n = logits.shape[-1]
    dt = logits.data.dtype
    flat_z = logits.data.reshape(-1, n)
    flat_t = t.reshape(-1).astype(np.int64)
    valid = flat_t != ignore_index
    if np.any(flat_t[valid] >= n) or np.any(flat_t[valid] < 0):
        raise _dims_error("cross_entropy_with_logits", logits.shape, t.shape, detail="target out of range")
    count = max(int(valid.sum()), 1)
    m = flat_z.max(axis=1, keepdims=True)
    e = np.exp(flat_z - m)
    lse = m[:, 0].astype(_F64) + np.log(e.sum(axis=1, dtype=_F64))
    rows = np.nonzero(valid)[0]
    nll = lse[rows] - flat_z[rows, flat_t[rows]]
    data = np.asarray(nll.sum() / count, dtype=dt)

    def backward(g):
        p = (e / e.sum(axis=1, keepdims=True, dtype=_F64)).astype(dt)
        p[rows, flat_t[rows]] -= 1.0
        p[~valid] = 0.0
        return ((p * dt.type(float(g) / count)).reshape(logits.shape),)

    return _result("cross_entropy_with_logits", data, (logits,), backward)


def rms_norm(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    d = x.shape[-1]
    if weight.shape != (d,):
        raise _dims_error("rms_norm", x.shape, weight.shape)
    xd = x.data
    inv = (1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True, dtype=_F64) + eps)).astype(xd.dtype)
    xhat = xd * inv

    def backward(g):
        gw = None
        if weight.requires_grad:
            gw = (g * xhat).reshape(-1, d).sum(axis=0, dtype=_F64).astype(weight.data.dtype)
        gxhat = g * weight.data
        gx = inv * (gxhat - xhat * _rowmean(gxhat * xhat))
        return gx, gw

    return _result("rms_norm", xhat * weight.data, (x, weight), backward)


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-8) -> Tensor:
    d = x.shape[-1]
    if weight.shape != (d,) or bias.shape != (d,):
        raise _dims_error("layer_norm", x.shape, weight.shape, bias.shape)
    xc = x.data - _rowmean(x.data)
    inv = (1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True, dtype=_F64) + eps)).astype(xc.dtype)
    xhat = xc * inv

    def backward(g):
        gw = (g * xhat).reshape(-1, d).sum(axis=0, dtype=_F64).astype(weight.data.dtype)
        gb = g.reshape(-1, d).sum(axis=0, dtype=_F64).astype(bias.data.dtype)
        gxhat = g * weight.data
        gx = inv * (gxhat - _rowmean(gxhat) - xhat * _rowmean(gxhat * xhat))
        return gx, gw, gb

    return _result("layer_norm", xhat * weight.data + bias.data, (x, weight, bias), backward)


# attention -------------------------------------------------------------------

def causal_multihead_attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int,
                               key_mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention over (B, T, D) inputs split into heads.

    Position i attends to positions j <= i. ``key_mask`` (B, T) marks real
    positions; masked keys are excluded except that every query may always
    attend to itself, so fully padded rows stay finite.
    """
    if q.ndim != 3 or q.shape != k.shape or q.shape != v.shape:
        raise _dims_error("causal_multihead_attention", q.shape, k.shape, v.shape)
    b, t, d = q.shape
    if d % n_heads:
        raise _dims_error("causal_multihead_attention", q.shape, detail=f"{d} not divisible by {n_heads} heads")
    hd = d // n_heads
    dt = q.data.dtype
    scale = dt.type(1.0 / math.sqrt(hd))

    def split(a):
        return a.reshape(b, t, n_heads, hd).transpose(0, 2, 1, 3)

    qh, kh, vh = split(q.data), split(k.data), split(v.data)
    allowed = np.tril(np.ones((t, t), dtype=bool))[None, None]
    if key_mask is not None:
        km = np.asarray(key_mask, dtype=bool)
        if km.shape != (b, t):
            raise _dims_error("causal_multihead_attention", q.shape, km.shape, detail="key_mask must be (B, T)")
        allowed = allowed & km[:, None, None, :]
        allowed = allowed | np.eye(t, dtype=bool)[None, None]
    s = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    s = np.where(allowed, s, -np.inf)
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    p = e / _rowsum(e)
    oh = p @ vh
    data = oh.transpose(0, 2, 1, 3).reshape(b, t, d)

    def backward(g):
        gh = split(g)
        gv = p.transpose(0, 1, 3, 2) @ gh
        gp = gh @ vh.transpose(0, 1, 3, 2)
        gs = p * (gp - _rowsum(gp * p)) * scale
        gq = gs @ kh
        gk = gs.transpose(0, 1, 3, 2) @ qh

        def merge(a):
            return a.transpose(0, 2, 1, 3).reshape(b, t, d)

        return merge(gq), merge(gk), merge(gv)

    return _result("causal_multihead_attention", data, (q, k, v), backward)


def forward_primitive(kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Dispatch by primitive name; mirrors calling the function directly."""
    if kind not in PRIMITIVES:
        raise ValueError(f"unknown primitive {kind!r}")
    fn = globals()[kind]
    if kind == "concat":
        return fn(list(inputs), **attrs)
    return fn(*inputs, **attrs)
