"""Differentiable operations over :class:`~aunet.numerics.tensor.Tensor`.

Every op computes its forward value with numpy and returns a closure for the
vector-Jacobian product. Reductions run over the last axis in a fixed order so
two runs with the same inputs agree bit for bit.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, make_result


class ConfigError(ValueError):
    """Invalid configuration value passed to an op."""


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return make_result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return make_result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(ad * bd, (a, b), bw, "mul")


def silu(x: Tensor) -> Tensor:
    xd = x.data
    sig = 1.0 / (1.0 + np.exp(-xd))

    def bw(g):
        return (g * (sig * (1.0 + xd * (1.0 - sig))),)

    return make_result(xd * sig, (x,), bw, "silu")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def bw(g):
        return (g * out,)

    return make_result(out, (x,), bw, "exp")


# -- shape ---------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape

    def bw(g):
        return (g.reshape(src),)

    return make_result(x.data.reshape(shape), (x,), bw, "reshape")


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, cuts, axis=axis))

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw, "concat")


# -- reductions ----------------------------------------------------------------

def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape

    def bw(g):
        return (np.broadcast_to(g, shape).copy(),)

    return make_result(np.asarray(x.data.sum(), dtype=x.dtype), (x,), bw, "sum")


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size

    def bw(g):
        return (np.broadcast_to(g / n, shape).copy(),)

    return make_result(np.asarray(x.data.mean(), dtype=x.dtype), (x,), bw, "mean")


# -- linear algebra ------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != (b.shape[-2] if b.ndim >= 2 else b.shape[0]):
        raise ShapeError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return make_result(ad @ bd, (a, b), bw, "matmul")


# -- normalisation / softmax ---------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return make_result(p, (x,), bw, "softmax")


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-5) -> Tensor:
    """Scale each row of ``x`` to unit root-mean-square, then multiply by ``gain``."""
    xd, gd = x.data, gain.data
    if xd.shape[-1] != gd.shape[-1]:
        raise ShapeError(f"rms_norm: feature sizes differ, {x.shape} vs gain {gain.shape}")
    d = xd.shape[-1]
    inv = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    normed = xd * inv

    def bw(g):
        gx = ggain = None
        if gain.requires_grad:
            ggain = (g * normed).reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            gn = g * gd
            gx = inv * (gn - normed * (gn * normed).sum(axis=-1, keepdims=True) / d)
        return gx, ggain

    return make_result(normed * gd, (x, gain), bw, "rms_norm")


# -- indexing ------------------------------------------------------------------

def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"embedding ids must lie in [0, {n})")
    return gather_rows(table, ids)


def gather_rows(x: Tensor, idx) -> Tensor:
    """Rows of a 2-D tensor selected by an integer array of any shape."""
    idx = np.asarray(idx, dtype=np.int64)
    if x.ndim != 2:
        raise ShapeError(f"gather_rows expects a 2-D source, got {x.shape}")
    shape = x.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx.reshape(-1), g.reshape(-1, shape[1]))
        return (out,)

    return make_result(x.data[idx], (x,), bw, "gather_rows")


def segment_mean(x: Tensor, seg, n_segments: int) -> Tensor:
    """Average rows of ``x`` [N, d] by segment id; ids < 0 are dropped.

    Empty segments produce zero rows.
    """
    seg = np.asarray(seg, dtype=np.int64)
    if x.ndim != 2 or seg.shape != (x.shape[0],):
        raise ShapeError(f"segment_mean: got x {x.shape} and ids {seg.shape}")
    keep = seg >= 0
    counts = np.bincount(seg[keep], minlength=n_segments)[:n_segments].astype(x.dtype)
    scale = np.where(counts > 0, 1.0 / np.maximum(counts, 1), 0.0).astype(x.dtype)
    out = np.zeros((n_segments, x.shape[1]), dtype=x.dtype)
    np.add.at(out, seg[keep], x.data[keep])
    out *= scale[:, None]

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[keep] = (g * scale[:, None])[seg[keep]]
        return (gx,)

    return make_result(out, (x,), bw, "segment_mean")


def multilinear(x: Tensor, which, maps: Tensor) -> Tensor:
    """Apply ``maps[which[i]]`` to row ``i`` of ``x``.

    ``x`` is [M, d_in], ``which`` holds M integers in [0, P) and ``maps`` is
    [P, d_in, d_out].
    """
    which = np.asarray(which, dtype=np.int64)
    if x.ndim != 2 or maps.ndim != 3 or x.shape[1] != maps.shape[1] or which.shape != (x.shape[0],):
        raise ShapeError(f"multilinear: x {x.shape}, which {which.shape}, maps {maps.shape}")
    xd, md = x.data, maps.data
    groups = [(p, np.nonzero(which == p)[0]) for p in np.unique(which)]
    out = np.empty((xd.shape[0], md.shape[2]), dtype=np.result_type(xd, md))
    for p, rows in groups:
        # one product per row, so a row's bits never depend on how many rows share its map
        out[rows] = (xd[rows][:, None, :] @ md[p])[:, 0, :]

    def bw(g):
        gx = np.empty_like(xd) if x.requires_grad else None
        gm = np.zeros_like(md) if maps.requires_grad else None
        for p, rows in groups:
            if gx is not None:
                gx[rows] = g[rows] @ md[p].T
            if gm is not None:
                gm[p] = xd[rows].T @ g[rows]
        return gx, gm

    return make_result(out, (x, maps), bw, "multilinear")


# -- positions and attention ---------------------------------------------------

def rotary_tables(positions, head_dim: int, base: float = 10000.0, dtype=np.float64):
    """cos/sin tables of shape [S, head_dim // 2] for absolute positions."""
    if head_dim % 2:
        raise ConfigError(f"rotary embeddings need an even head dim, got {head_dim}")
    pos = np.asarray(positions, dtype=np.float64)
    inv_freq = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    ang = pos[:, None] * inv_freq[None, :]
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def rotary(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate feature pairs (i, i + Dh/2) of ``x`` [..., S, H, Dh] by position."""
    xd = x.data
    half = xd.shape[-1] // 2
    c, s = cos[:, None, :], sin[:, None, :]
    x1, x2 = xd[..., :half], xd[..., half:]
    out = np.concatenate([x1 * c - x2 * s, x1 * s + x2 * c], axis=-1)

    def bw(g):
        g1, g2 = g[..., :half], g[..., half:]
        return (np.concatenate([g1 * c + g2 * s, -g1 * s + g2 * c], axis=-1),)

    return make_result(out, (x,), bw, "rotary")


def attention_mask(n_q: int, n_k: int, window: int | None, q_offset: int = 0) -> np.ndarray:
    """Boolean [n_q, n_k] mask; query i sits at absolute position q_offset + i."""
    qi = np.arange(n_q)[:, None] + q_offset
    kj = np.arange(n_k)[None, :]
    allowed = kj <= qi
    if window is not None:
        allowed &= kj > qi - window
    return allowed


def causal_windowed_attention(q: Tensor, k: Tensor, v: Tensor, window: int | None = None,
                              q_offset: int = 0) -> Tensor:
    """Multi-head causal attention restricted to the last ``window`` keys.

    Shapes are [..., S, H, Dh] for ``q`` and [..., T, H, Dh] for ``k``/``v``
    with T = q_offset + S: query i sits at absolute position q_offset + i and
    attends to keys j with max(0, pos - window + 1) <= j <= pos. ``window``
    None means unbounded.
    """
    if window is not None and window <= 0:
        raise ConfigError(f"attention window must be positive, got {window}")
    if k.shape != v.shape or q.shape[:-3] != k.shape[:-3] or q.shape[-2:] != k.shape[-2:]:
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape}")
    n_q, n_k = q.shape[-3], k.shape[-3]
    if q_offset + n_q != n_k:
        raise ShapeError(f"attention: {n_q} queries at offset {q_offset} need {q_offset + n_q} keys, got {n_k}")
    dh = q.shape[-1]
    scale = 1.0 / math.sqrt(dh)
    qh = np.swapaxes(q.data, -3, -2)  # [..., H, S, Dh]
    kh = np.swapaxes(k.data, -3, -2)
    vh = np.swapaxes(v.data, -3, -2)
    allowed = attention_mask(n_q, n_k, window, q_offset)
    scores = (qh @ np.swapaxes(kh, -1, -2)) * scale
    scores = np.where(allowed, scores, -np.inf)
    e = np.exp(scores - scores.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)
    out = np.swapaxes(p @ vh, -3, -2)

    def bw(g):
        gh = np.swapaxes(g, -3, -2)
        gv = np.swapaxes(p, -1, -2) @ gh
        gp = gh @ np.swapaxes(vh, -1, -2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * scale
        gq = gs @ kh
        gk = np.swapaxes(gs, -1, -2) @ qh
        return (np.swapaxes(gq, -3, -2), np.swapaxes(gk, -3, -2), np.swapaxes(gv, -3, -2))

    return make_result(np.ascontiguousarray(out), (q, k, v), bw, "attention")


# -- loss ----------------------------------------------------------------------

def cross_entropy_logits(logits: Tensor, targets, ignore_index: int = -100) -> Tensor:
    """Mean negative log-softmax of the target class over non-ignored rows."""
    targets = np.asarray(targets, dtype=np.int64)
    v = logits.shape[-1]
    flat = logits.data.reshape(-1, v)
    t = targets.reshape(-1)
    if t.shape[0] != flat.shape[0]:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    keep = t != ignore_index
    n = int(keep.sum())
    if n == 0:
        raise ValueError("cross_entropy: every position is ignored, the mean is undefined")
    if (t[keep] < 0).any() or (t[keep] >= v).any():
        raise IndexError(f"cross_entropy: targets must lie in [0, {v})")
    m = flat.max(axis=-1, keepdims=True)
    shifted = flat - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    rows = np.nonzero(keep)[0]
    nll = lse[rows, 0] - shifted[rows, t[rows]]
    loss = np.asarray(nll.sum() / n, dtype=logits.dtype)

    def bw(g):
        p = np.exp(shifted - lse)
        p[~keep] = 0.0
        p[rows, t[rows]] -= 1.0
        return ((p * (g / n)).reshape(logits.shape),)

    return make_result(loss, (logits,), bw, "cross_entropy")
