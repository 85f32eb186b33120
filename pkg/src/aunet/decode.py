"""Byte-at-a-time generation with per-stage caches.

Stage 1 runs once per byte. A deeper stage runs only when the streaming
splitter (or, further down, the stage above) confirms a new boundary; its
output is kept as the latest coarse vector of that stage and is expanded over
the following fine positions with an offset that grows by one per position.
The computation per position is the one the full forward pass performs, so
incremental logits match it to rounding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .blocks import KVCache, stage_forward
from .hierarchy import AUNet
from .numerics import Tensor
from .splitter import StreamingSplitter


@dataclass
class StageState:
    down: KVCache = field(default_factory=KVCache)
    up: KVCache = field(default_factory=KVCache)
    count: int = 0  # positions seen at this stage
    rows: list[np.ndarray] = field(default_factory=list)  # contracting outputs not yet pooled
    rows_start: int = 0  # stage index of rows[0]
    n_coarse: int = 0  # coarse rows built from this stage
    coarse: np.ndarray | None = None  # latest output of the next deeper stage
    coarse_pos: int = -1  # index (in this stage) of that coarse row's boundary
    coarse_fresh: bool = False  # no fine row has read ``coarse`` yet


@dataclass
class DecodeState:
    stages: list[StageState]
    splitter: StreamingSplitter
    n_bytes: int = 0
    boundaries: list[list[int]] = field(default_factory=list)  # byte index per stage >= 2

    def cache_lengths(self) -> list[int]:
        return [s.down.length for s in self.stages]


def new_state(model: AUNet) -> DecodeState:
    n = model.cfg.n_stages
    return DecodeState(stages=[StageState() for _ in range(n)], splitter=StreamingSplitter(model.cfg.splitter),
                       boundaries=[[] for _ in range(n - 1)])


class Decoder:
    """Incremental evaluation of an :class:`AUNet` (weights are only read)."""

    def __init__(self, model: AUNet):
        self.model = model
        self.cfg = model.cfg
        self.n = model.cfg.n_stages

    def _pool(self, st: StageState, end: int, s: int) -> Tensor:
        rows = st.rows[: end + 1 - st.rows_start]
        del st.rows[: end + 1 - st.rows_start]
        st.rows_start = end + 1
        if self.cfg.pooling == "select":
            x = rows[-1]
        else:
            x = np.mean(np.stack(rows), axis=0)
        return Tensor(x[None]) @ self.model.params[f"pool{s + 1}.proj"]

    def _expand(self, st: StageState, j: int, s: int) -> Tensor:
        """Upsampled input of fine position ``j`` at 0-based stage ``s``."""
        dim = self.cfg.stages[s].dim
        if st.coarse is None:
            if self.cfg.upsampling == "simple":
                return Tensor(np.zeros((1, dim), dtype=self.model.dtype))
            src, off, first = np.array([-1]), np.array([j]), np.array([False])
            coarse = Tensor(np.zeros((0, self.cfg.stages[s + 1].dim), dtype=self.model.dtype))
        else:
            src, off, first = np.array([0]), np.array([j - st.coarse_pos - 1]), np.array([st.coarse_fresh])
            coarse = Tensor(st.coarse[None])
            st.coarse_fresh = False
        return self.model.upsample_rows(coarse, src, off, first, s + 1)

    def _coarse_row(self, state: DecodeState, s: int, end: int, depth: int) -> None:
        """Build the stage s+1 row for fine boundary ``end`` of 0-based stage ``s``."""
        fine = state.stages[s]
        if fine.n_coarse >= self.cfg.stages[s + 1].max_len:
            # stage s+1 is full; the fine rows are never pooled
            fine.rows.clear()
            fine.rows_start = fine.count
            return
        x = self._pool(fine, end, s)
        st = state.stages[s + 1]
        i = st.count
        h = stage_forward(x, self.model.down[s + 1], cache=st.down)
        st.count += 1
        if s + 1 == self.n - 1:
            out = h
        else:
            st.rows.append(h.data[0])
            u = self._expand(st, i, s + 1)
            out = stage_forward(u + h, self.model.up[s + 1], cache=st.up)
            if depth >= 1 and s + 2 < self.n:
                # the deeper row is built now but only read from row i + 1 on
                self._coarse_row(state, s + 1, i, depth - 1)
        fine.coarse = out.data[0]
        fine.coarse_pos = end
        fine.coarse_fresh = True
        fine.n_coarse += 1

    def step(self, state: DecodeState, byte: int) -> np.ndarray:
        """Consume one byte; return the logits for the byte that follows it."""
        if not 0 <= int(byte) < self.cfg.vocab:
            raise ValueError(f"byte id {byte} outside vocabulary of {self.cfg.vocab}")
        with nx.no_grad():
            j = state.n_bytes
            events = state.splitter.push(int(byte)) if byte < 256 else []
            st = state.stages[0]
            x = nx.embedding(self.model.params["embed"], [int(byte)])
            h = stage_forward(x, self.model.down[0], cache=st.down)
            st.count += 1
            if self.n == 1:
                out = h
            else:
                st.rows.append(h.data[0])
                for end, depth in events:
                    self._record(state, end, depth)
                    self._coarse_row(state, 0, end, depth)
                out = stage_forward(self._expand(st, j, 0) + h, self.model.up[0], cache=st.up)
            state.n_bytes += 1
            out = nx.rms_norm(out, self.model.params["norm"], self.cfg.norm_eps)
            return (out @ self.model.params["head"]).data[0]

    def _record(self, state: DecodeState, end: int, depth: int) -> None:
        for k in range(min(depth + 1, self.n - 1)):
            state.boundaries[k].append(end)

    def feed(self, state: DecodeState, data: bytes) -> np.ndarray | None:
        logits = None
        for b in data:
            logits = self.step(state, b)
        return logits


def step(model: AUNet, state: DecodeState, next_byte: int) -> tuple[np.ndarray, DecodeState]:
    return Decoder(model).step(state, next_byte), state


def generate(model: AUNet, prompt: bytes, n: int, greedy: bool = True, temperature: float = 1.0,
             seed: int = 0) -> bytes:
    """``prompt`` followed by ``n`` generated bytes.

    An empty prompt is conditioned on a single 0x00 (the document separator),
    which is not part of the returned bytes. Greedy picks the lowest byte id
    among ties.
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    if n == 0:
        return bytes(prompt)
    if not greedy and temperature <= 0:
        raise ValueError("temperature must be positive")
    rng = np.random.default_rng(seed)
    dec = Decoder(model)
    state = new_state(model)
    logits = dec.feed(state, bytes(prompt) or b"\x00")
    out = bytearray(prompt)
    for k in range(n):
        if greedy:
            nxt = int(np.argmax(logits))  # first maximum = lowest id
        else:
            z = logits.astype(np.float64) / temperature
            p = np.exp(z - z.max())
            nxt = int(rng.choice(len(p), p=p / p.sum()))
        nxt = min(nxt, 255)
        out.append(nxt)
        if k + 1 < n:
            logits = dec.step(state, nxt)
    return bytes(out)
