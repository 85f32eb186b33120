"""Central finite differences, the independent check on analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def numerical_grad(f: Callable[[], Tensor], x: Tensor, h: float = 1e-5,
                   indices: Sequence[int] | None = None) -> np.ndarray:
    """d f / d x by central differences, step ``h * max(1, |x_i|)``.

    ``f`` must rebuild its output from the current contents of ``x.data``.
    Only the flat ``indices`` are probed when given; the others stay zero.
    """
    flat = x.data.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    probe = range(flat.size) if indices is None else indices
    with no_grad():
        for i in probe:
            orig = flat[i]
            step = h * max(1.0, abs(float(orig)))
            flat[i] = orig + step
            hi = float(f().data)
            flat[i] = orig - step
            lo = float(f().data)
            flat[i] = orig
            out[i] = (hi - lo) / (2 * step)
    return out.reshape(x.shape)


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - b| / max(|a|, |b|, floor), elementwise max over the arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max()) if a.size else 0.0
