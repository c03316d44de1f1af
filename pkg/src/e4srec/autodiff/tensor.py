"""Dense tensors with define-by-run reverse-mode differentiation."""

from __future__ import annotations

import contextlib
import logging
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from e4srec.errors import ContractError

log = logging.getLogger(__name__)

DTYPE = np.float32

_state = threading.local()


def _flag(name: str, default: bool) -> bool:
    return getattr(_state, name, default)


def is_grad_enabled() -> bool:
    return _flag("grad_enabled", True)


def is_eval_mode() -> bool:
    return _flag("eval_mode", False)


@contextlib.contextmanager
def no_grad():
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def eval_mode():
    """Disable dropout (and graph recording) for the current thread."""
    prev_eval, prev_grad = is_eval_mode(), is_grad_enabled()
    _state.eval_mode = True
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.eval_mode = prev_eval
        _state.grad_enabled = prev_grad


class Tensor:
    """A numpy array plus the bookkeeping needed for backprop.

    Storage is float32 unless a float64 array is passed explicitly (the
    finite-difference oracle runs the same ops in float64).
    """

    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "op", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != np.float64:
            arr = arr.astype(DTYPE, copy=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label}, requires_grad={self.requires_grad})"

    # operator sugar; implementations live in functional
    def __add__(self, other):
        from e4srec.autodiff import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from e4srec.autodiff import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from e4srec.autodiff import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from e4srec.autodiff import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from e4srec.autodiff import functional as F
        return F.mul(self, -1.0)

    def __matmul__(self, other):
        from e4srec.autodiff import functional as F
        return F.matmul(self, other)

    def __getitem__(self, index):
        from e4srec.autodiff import functional as F
        return F.slice(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` with every node after its inputs."""
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
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to every trainable leaf.

    Returns a mapping keyed by the leaf tensors themselves. If ``params`` is
    given the mapping is restricted to those tensors. Leaves with
    ``requires_grad=False`` never appear.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        log.warning("loss is detached from every trainable parameter; no gradients")
        return {}
    order = topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None) if node.parents else grads.get(id(node))
        if g is None or node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    leaves = {id(n): n for n in order if n.is_leaf and n.requires_grad}
    out = {leaves[k]: v.astype(leaves[k].data.dtype, copy=False) for k, v in grads.items() if k in leaves}
    if params is not None:
        wanted = {id(p) for p in params}
        out = {t: g for t, g in out.items() if id(t) in wanted}
    return out


def parameters_hash(arrays: Sequence[np.ndarray]) -> str:
    import hashlib

    h = hashlib.sha256()
    for a in arrays:
        h.update(str(a.shape).encode())
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()
