"""Desk-scale training loop.

Documents are joined with a 0x00 separator into one byte stream, cut into
rows of ``seq_len`` bytes and batched in a seeded order. The last row is
padded; padded positions and the final position of the stream carry the
ignore target, so they add nothing to the loss or its gradient.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import numerics as nx
from .checkpoint import save_checkpoint
from .config import AUNetConfig, Config, TrainConfig
from .hierarchy import AUNet
from .numerics import Tensor
from .splitter import SegmentMap, SplitterConfig, split

log = logging.getLogger(__name__)

SEP = 0x00
PAD = 0x00
IGNORE = -100


class TrainingError(RuntimeError):
    """Training cannot continue (bad data, divergence or non-finite gradients)."""


# -- data ------------------------------------------------------------------------

@dataclass
class PackedBatch:
    ids: np.ndarray  # [B, S] byte ids
    targets: np.ndarray  # [B, S] next byte, IGNORE where masked
    segmaps: list[SegmentMap] | None
    n_real: int  # unmasked target positions

    @property
    def mask(self) -> np.ndarray:
        return self.targets != IGNORE


def join_documents(docs: bytes | Sequence[bytes]) -> bytes:
    """A single byte string is one document; each document ends with the separator."""
    if isinstance(docs, (bytes, bytearray)):
        docs = [bytes(docs)]
    return b"".join(bytes(d) + bytes([SEP]) for d in docs)


def make_rows(stream: bytes, seq_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Inputs and next-byte targets, one row per ``seq_len`` slice of ``stream``."""
    if not stream:
        raise TrainingError("empty corpus")
    n_rows = -(-len(stream) // seq_len)
    buf = np.full(n_rows * seq_len + 1, PAD, dtype=np.int64)
    buf[: len(stream)] = np.frombuffer(stream, dtype=np.uint8)
    ids = buf[:-1].reshape(n_rows, seq_len)
    targets = buf[1:].copy()
    targets[len(stream) - 1:] = IGNORE
    return ids, targets.reshape(n_rows, seq_len)


class Packer:
    """Fixed-shape batches over a packed corpus, reshuffled every epoch."""

    def __init__(self, docs: bytes | Sequence[bytes], seq_len: int, batch: int, seed: int = 0,
                 n_stages: int = 2, splitter: SplitterConfig | None = None, joined: bool = False):
        stream = bytes(docs) if joined else join_documents(docs)
        self.ids, self.targets = make_rows(stream, seq_len)
        if len(self.ids) < batch:
            raise TrainingError(f"corpus gives {len(self.ids)} rows of {seq_len} bytes; one batch needs {batch}")
        self.batch, self.seed, self.n_stages = batch, seed, n_stages
        self.splitter = splitter or SplitterConfig()
        self._segmaps: dict[int, SegmentMap] = {}

    def segmap(self, r: int) -> SegmentMap:
        if r not in self._segmaps:
            row = bytes(self.ids[r].astype(np.uint8))
            self._segmaps[r] = split(row, self.splitter, n_stages=max(self.n_stages, 2))
        return self._segmaps[r]

    @property
    def batches_per_epoch(self) -> int:
        return len(self.ids) // self.batch

    def __iter__(self) -> Iterator[PackedBatch]:
        epoch = 0
        while True:
            order = np.random.default_rng([self.seed, epoch]).permutation(len(self.ids))
            for k in range(self.batches_per_epoch):
                rows = order[k * self.batch: (k + 1) * self.batch]
                t = self.targets[rows]
                maps = [self.segmap(int(r)) for r in rows] if self.n_stages > 1 else None
                yield PackedBatch(self.ids[rows], t, maps, int((t != IGNORE).sum()))
            epoch += 1


def pack(docs: bytes | Sequence[bytes], seq_len: int, batch: int, seed: int = 0, n_stages: int = 2,
         splitter: SplitterConfig | None = None) -> Iterator[PackedBatch]:
    return iter(Packer(docs, seq_len, batch, seed, n_stages, splitter))


def heldout_split(stream: bytes, fraction: float) -> tuple[bytes, bytes]:
    """Training bytes and the final ``fraction`` of the corpus for evaluation."""
    cut = len(stream) - max(1, int(round(len(stream) * fraction))) if fraction > 0 else len(stream)
    return stream[:cut], stream[cut:]


# -- optimisation ------------------------------------------------------------------

def cosine_lr(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``lr_max``, then cosine decay to ``lr_min_fraction * lr_max``."""
    total = cfg.total_steps
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    warm = cfg.warmup_fraction * total
    lo = cfg.lr_min_fraction * cfg.lr_max
    if step < warm:
        return cfg.lr_max * step / warm
    frac = (step - warm) / max(total - warm, 1e-12)
    return lo + 0.5 * (cfg.lr_max - lo) * (1.0 + math.cos(math.pi * min(frac, 1.0)))


class AdamW:
    """Adam with decoupled weight decay and global-norm gradient clipping.

    Decay applies to matrices only (``ndim >= 2``); gains and vectors are not
    decayed.
    """

    def __init__(self, params: dict[str, Tensor], betas=(0.9, 0.95), eps: float = 1e-8,
                 weight_decay: float = 0.1, grad_clip: float | None = 0.2):
        self.params = params
        self.b1, self.b2 = betas
        self.eps, self.wd, self.clip = eps, weight_decay, grad_clip
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.t = 0

    def grads(self) -> dict[str, np.ndarray]:
        out = {}
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient in parameter {k!r}")
            out[k] = g
        return out

    def step(self, lr: float) -> float:
        """Apply one update; returns the gradient norm before clipping."""
        grads = self.grads()
        norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
        scale = self.clip / norm if self.clip is not None and norm > self.clip else 1.0
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = grads[k] * scale
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.wd and p.data.ndim >= 2:
                p.data *= 1.0 - lr * self.wd
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)
        return norm


# -- evaluation ----------------------------------------------------------------------

def bits_per_byte(model: AUNet, data: bytes, seq_len: int, batch: int = 8) -> float:
    """Mean next-byte cross-entropy in bits over ``data`` cut into rows."""
    ids, targets = make_rows(bytes(data), seq_len)
    total, count = 0.0, 0
    with nx.no_grad():
        for i in range(0, len(ids), batch):
            x, t = ids[i: i + batch], targets[i: i + batch]
            n = int((t != IGNORE).sum())
            if not n:
                continue
            loss = model.loss(x, t)
            total += loss.item() * n
            count += n
    if not count:
        raise ValueError("no bytes to evaluate")
    return total / count / math.log(2)


# -- loop --------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: AUNet
    history: list[dict] = field(default_factory=list)
    final_bpb: float | None = None


def train(config: Config, corpus: bytes | Sequence[bytes], out_dir: str | Path | None = None,
          model: AUNet | None = None, max_steps: int | None = None) -> TrainResult:
    """Train ``config.model`` on ``corpus``; log to ``out_dir/metrics.jsonl``."""
    mcfg: AUNetConfig = config.model
    tcfg: TrainConfig = config.train
    if tcfg.seq_len > mcfg.stages[0].max_len:
        raise TrainingError(f"seq_len {tcfg.seq_len} exceeds stage-1 max_len {mcfg.stages[0].max_len}")
    stream = join_documents(corpus)
    train_bytes, held = heldout_split(stream, tcfg.heldout_fraction)
    held = held[: tcfg.eval_bytes]
    packer = Packer(train_bytes, tcfg.seq_len, tcfg.batch_rows, tcfg.seed, mcfg.n_stages, mcfg.splitter,
                    joined=True)
    model = model or AUNet(mcfg, seed=tcfg.seed)
    opt = AdamW(model.params, (tcfg.beta1, tcfg.beta2), tcfg.adam_eps, tcfg.weight_decay, tcfg.grad_clip)
    out = Path(out_dir) if out_dir else None
    metrics = None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        metrics = open(out / "metrics.jsonl", "a")
    result = TrainResult(model)
    steps = min(tcfg.total_steps, max_steps or tcfg.total_steps)
    batches = iter(packer)
    t_last, bytes_since = time.perf_counter(), 0
    try:
        for step in range(1, steps + 1):
            b = next(batches)
            lr = cosine_lr(step, tcfg)
            model.zero_grad()
            loss = model.loss(b.ids, b.targets, b.segmaps)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"loss became {value} at step {step}; last checkpoint kept")
            loss.backward()
            norm = opt.step(lr)
            bytes_since += b.n_real
            rec = None
            if step % tcfg.log_interval == 0 or step == steps:
                now = time.perf_counter()
                rec = {"step": step, "loss": value, "lr": lr, "grad_norm": norm, "bpb": None,
                       "bytes_per_sec": bytes_since / max(now - t_last, 1e-9)}
                t_last, bytes_since = now, 0
            if held and (step % tcfg.eval_interval == 0 or step == steps):
                bpb = bits_per_byte(model, held, tcfg.seq_len, tcfg.batch_rows)
                result.final_bpb = bpb
                rec = rec or {"step": step, "loss": value, "lr": lr, "grad_norm": norm, "bytes_per_sec": None}
                rec["bpb"] = bpb
            if rec:
                result.history.append(rec)
                log.info("step %d loss %.4f nats/byte lr %.3g bpb %s", step, value, lr, rec["bpb"])
                if metrics:
                    metrics.write(json.dumps(rec) + "\n")
                    metrics.flush()
            if out and tcfg.checkpoint_interval and (step % tcfg.checkpoint_interval == 0 or step == steps):
                save_checkpoint(model, out / "last.aunt", config)
    finally:
        if metrics:
            metrics.close()
    if out and not tcfg.checkpoint_interval:
        save_checkpoint(model, out / "last.aunt", config)
    return result
