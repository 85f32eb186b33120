"""Pre-norm transformer layers shared by every stage.

Each layer is ``x + Attn(RMSNorm(x))`` followed by ``x + FFN(RMSNorm(x))``
with rotary positions, causal windowed multi-head attention and a SwiGLU
feed-forward. Weights are stored as ``[in, out]`` matrices.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import Tensor

LAYER_PARAMS = ("wq", "wk", "wv", "wo", "w1", "w2", "w3", "attn_norm", "ffn_norm")


@dataclass
class LayerWeights:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    w1: Tensor  # gate, dim x ffn
    w2: Tensor  # value, dim x ffn
    w3: Tensor  # output, ffn x dim
    attn_norm: Tensor
    ffn_norm: Tensor

    def items(self):
        return [(n, getattr(self, n)) for n in LAYER_PARAMS]


@dataclass
class StageWeights:
    """A stack of layers with its attention geometry."""

    layers: list[LayerWeights]
    head_dim: int
    window: int | None = None
    eps: float = 1e-5
    rope_base: float = 10000.0

    def named_parameters(self, prefix: str = ""):
        for i, layer in enumerate(self.layers):
            for n, t in layer.items():
                yield f"{prefix}{i}.{n}", t


@dataclass
class KVCache:
    """Keys and values of every position seen so far, one pair per layer."""

    keys: list[list[np.ndarray]] = field(default_factory=list)
    values: list[list[np.ndarray]] = field(default_factory=list)
    length: int = 0


def init_layer(rng: np.random.Generator, dim: int, ffn: int, n_layers: int, std: float = 0.02,
               dtype=np.float32) -> LayerWeights:
    """Normal init; output projections scaled down by sqrt(2 * depth)."""
    out_std = std / np.sqrt(2 * max(n_layers, 1))

    def w(shape, s):
        return Tensor(rng.normal(0.0, s, shape).astype(dtype), requires_grad=True)

    return LayerWeights(
        wq=w((dim, dim), std), wk=w((dim, dim), std), wv=w((dim, dim), std), wo=w((dim, dim), out_std),
        w1=w((dim, ffn), std), w2=w((dim, ffn), std), w3=w((ffn, dim), out_std),
        attn_norm=Tensor(np.ones(dim, dtype=dtype), requires_grad=True),
        ffn_norm=Tensor(np.ones(dim, dtype=dtype), requires_grad=True),
    )


def init_stage(rng: np.random.Generator, dim: int, n_layers: int, ffn: int, head_dim: int,
               window: int | None = None, std: float = 0.02, eps: float = 1e-5,
               rope_base: float = 10000.0, dtype=np.float32) -> StageWeights:
    layers = [init_layer(rng, dim, ffn, n_layers, std, dtype) for _ in range(n_layers)]
    return StageWeights(layers=layers, head_dim=head_dim, window=window, eps=eps, rope_base=rope_base)


def layer_param_count(dim: int, ffn: int, norms: bool = False) -> int:
    """Matrix parameters of one layer, 4 d^2 + 3 d ffn, plus norm gains if asked."""
    return 4 * dim * dim + 3 * dim * ffn + (2 * dim if norms else 0)


def _split_heads(x: Tensor, head_dim: int) -> Tensor:
    return nx.reshape(x, x.shape[:-1] + (x.shape[-1] // head_dim, head_dim))


def _attention(h: Tensor, layer: LayerWeights, w: StageWeights, positions: np.ndarray,
               cache: KVCache | None, index: int) -> Tensor:
    cos, sin = nx.rotary_tables(positions, w.head_dim, w.rope_base, dtype=h.dtype)
    q = nx.rotary(_split_heads(h @ layer.wq, w.head_dim), cos, sin)
    k = nx.rotary(_split_heads(h @ layer.wk, w.head_dim), cos, sin)
    v = _split_heads(h @ layer.wv, w.head_dim)
    offset = 0
    if cache is not None:
        # inference only: keys of earlier positions come from the cache
        offset = cache.length
        if len(cache.keys) <= index:
            cache.keys.append([])
            cache.values.append([])
        cache.keys[index].append(k.data)
        cache.values[index].append(v.data)
        axis = k.ndim - 3
        k = Tensor(np.concatenate(cache.keys[index], axis=axis))
        v = Tensor(np.concatenate(cache.values[index], axis=axis))
    a = nx.causal_windowed_attention(q, k, v, w.window, q_offset=offset)
    a = nx.reshape(a, a.shape[:-2] + (a.shape[-2] * a.shape[-1],))
    return a @ layer.wo


def _ffn(h: Tensor, layer: LayerWeights) -> Tensor:
    return (nx.silu(h @ layer.w1) * (h @ layer.w2)) @ layer.w3


def stage_forward(x: Tensor, w: StageWeights, positions=None, cache: KVCache | None = None) -> Tensor:
    """Run ``x`` [..., S, dim] through every layer of ``w``.

    ``positions`` are the absolute positions of the S rows (default 0..S-1,
    or continuing from ``cache.length``). With a cache the new keys and values
    are appended and the S rows attend to everything cached before them.
    """
    s = x.shape[-2]
    start = cache.length if cache is not None else 0
    if positions is None:
        positions = np.arange(start, start + s)
    positions = np.asarray(positions)
    for i, layer in enumerate(w.layers):
        x = x + _attention(nx.rms_norm(x, layer.attn_norm, w.eps), layer, w, positions, cache, i)
        x = x + _ffn(nx.rms_norm(x, layer.ffn_norm, w.eps), layer)
    if cache is not None:
        cache.length += s
    return x
