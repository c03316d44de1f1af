"""Central finite-difference oracle, run in float64 and independent of backward()."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from e4srec.autodiff.tensor import Tensor


def numerical_gradients(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = 1e-3) -> list[np.ndarray]:
    """d fn(*arrays) / d arrays by central differences.

    ``fn`` receives float64 tensors without grad tracking and must return a
    scalar tensor.
    """
    base = [np.array(a, dtype=np.float64) for a in arrays]
    out = []
    for i, a in enumerate(base):
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gf = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            plus = float(fn(*[Tensor(x) for x in base]).data)
            flat[j] = orig - h
            minus = float(fn(*[Tensor(x) for x in base]).data)
            flat[j] = orig
            gf[j] = (plus - minus) / (2 * h)
        out.append(g)
    return out


def analytic_gradients(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray]) -> list[np.ndarray]:
    from e4srec.autodiff.tensor import backward

    ts = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    grads = backward(fn(*ts))
    return [grads.get(t, np.zeros_like(t.data)) for t in ts]


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> float:
    """max |a - n| / max(|a|, |n|, floor) over all entries."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_gradients(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = 1e-3) -> float:
    """Worst relative error between backward() and finite differences."""
    ana = analytic_gradients(fn, arrays)
    num = numerical_gradients(fn, arrays, h=h)
    return max(max_relative_error(a, n) for a, n in zip(ana, num))
