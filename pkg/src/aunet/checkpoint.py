"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    b"AUNT"  u32 version  u32 config_len  config (UTF-8 YAML)
    u32 n_tensors
    n_tensors x { u16 name_len, name, u32 rank, rank x u64 extent, u64 offset }
    u64 payload_len  payload (float32, row-major, offsets relative to its start)

Files are written to a temporary name and renamed into place, so an
interrupted save never clobbers the previous checkpoint.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .hierarchy import AUNet

MAGIC = b"AUNT"
VERSION = 1


class CheckpointError(ValueError):
    """The file is not a readable checkpoint of a supported version."""


def encode(state: dict[str, np.ndarray], config_text: str) -> bytes:
    cfg_bytes = config_text.encode("utf-8")
    head = [MAGIC, struct.pack("<II", VERSION, len(cfg_bytes)), cfg_bytes, struct.pack("<I", len(state))]
    payload = []
    offset = 0
    for name, arr in state.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode("utf-8")
        head.append(struct.pack("<H", len(nb)) + nb + struct.pack("<I", a.ndim))
        head.append(struct.pack(f"<{a.ndim}Q", *a.shape) + struct.pack("<Q", offset))
        payload.append(a.tobytes())
        offset += a.nbytes
    head.append(struct.pack("<Q", offset))
    return b"".join(head + payload)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint is truncated")
        out = self.buf[self.pos: self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(buf: bytes) -> tuple[dict[str, np.ndarray], str]:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, cfg_len = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (this build reads {VERSION})")
    try:
        config_text = r.take(cfg_len).decode("utf-8")
    except UnicodeDecodeError:
        raise CheckpointError("embedded config is not UTF-8") from None
    (n,) = r.unpack("<I")
    entries = []
    for _ in range(n):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}Q") if rank else ()
        (offset,) = r.unpack("<Q")
        entries.append((name, tuple(int(x) for x in shape), int(offset)))
    (payload_len,) = r.unpack("<Q")
    payload = r.take(payload_len)
    if r.pos != len(buf):
        raise CheckpointError("trailing bytes after payload")
    spans = []
    state = {}
    for name, shape, offset in entries:
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > payload_len:
            raise CheckpointError(f"tensor {name!r} runs past the payload")
        spans.append((offset, offset + nbytes, name))
        if name in state:
            raise CheckpointError(f"duplicate tensor {name!r}")
        state[name] = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=offset).reshape(shape).copy()
    spans.sort()
    for (a0, a1, an), (b0, _, bn) in zip(spans, spans[1:]):
        if b0 < a1:
            raise CheckpointError(f"tensors {an!r} and {bn!r} overlap")
    return state, config_text


def save_checkpoint(model: AUNet, path: str | Path, config: cfgmod.Config | None = None) -> None:
    config = config or cfgmod.Config(model=model.cfg)
    data = encode(model.state_dict(), cfgmod.dumps(config))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> tuple[AUNet, cfgmod.Config]:
    state, text = decode(Path(path).read_bytes())
    config = cfgmod.loads(text)
    model = AUNet(config.model)
    model.load_state_dict(state)
    return model, config
