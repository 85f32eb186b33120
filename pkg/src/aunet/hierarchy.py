"""The hierarchical byte-level U-Net.

Stage 1 runs over bytes. Each deeper stage runs over a subset of the
positions of the stage above (word ends, then every few words), pooled at
the boundary bytes. On the way back up every coarse vector is expanded over
the fine positions that follow it and added to the skip connection.

Causality: a fine position ``j`` may only read the coarse vector of a
boundary once the boundary is certain, i.e. once its commit point (the
input index that settled it) is ``<= j``, and only if the boundary lies
strictly before ``j``. Before the first usable boundary a learned init
vector is used instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .blocks import StageWeights, init_stage, layer_param_count, stage_forward
from .config import AUNetConfig
from .numerics import Tensor
from .splitter import SegmentMap, split


@dataclass
class StageLink:
    """Index arrays tying a fine stage to the next coarser one, batched [B, ...]."""

    n_fine: int
    n_coarse: int
    pool_idx: np.ndarray  # [B, n_coarse] fine row pooled into each coarse row (pads: 0)
    n_real: np.ndarray  # [B] number of real coarse rows
    seg: np.ndarray  # [B, n_fine] coarse segment holding each fine row, -1 if none
    src: np.ndarray  # [B, n_fine] coarse row read by each fine row, -1 for the init vector
    offset: np.ndarray  # [B, n_fine] distance past that coarse row's boundary
    first: np.ndarray  # [B, n_fine] True on the first fine row reading a coarse row


@dataclass
class Layout:
    lengths: list[int]  # padded length of every stage
    positions: list[list[list[int]]]  # per row, per stage >= 2: byte index of each real position
    links: list[StageLink]


def _row_link(pool: list[int], commits: list[int], n_fine: int):
    j = np.arange(n_fine)
    pool_a = np.asarray(pool, dtype=np.int64)
    src = np.searchsorted(np.asarray(commits, dtype=np.int64), j, side="right") - 1
    offset = np.where(src >= 0, j - pool_a[np.maximum(src, 0)] - 1 if len(pool) else j, j)
    prev = np.concatenate([[-1], src[:-1]])
    first = (src >= 0) & (src != prev)
    seg = np.searchsorted(pool_a, j, side="left")
    seg = np.where(seg < len(pool), seg, -1)
    return src, offset, first, seg


def _check_boundaries(boundaries, n: int) -> np.ndarray:
    b = np.asarray(boundaries, dtype=np.int64).reshape(-1)
    if b.size and (np.any(np.diff(b) <= 0) or b[0] < 0 or b[-1] >= n):
        raise ValueError(f"boundaries must be strictly increasing and lie in [0, {n})")
    return b


def pool_select(h: Tensor, boundaries, proj: Tensor) -> Tensor:
    """Rows of ``h`` [S, d] at the boundary indices, projected to the next width."""
    b = _check_boundaries(boundaries, h.shape[0])
    if not b.size:
        return Tensor(np.zeros((0, proj.shape[1]), dtype=h.dtype))
    return nx.gather_rows(h, b) @ proj


def pool_average(h: Tensor, boundaries, proj: Tensor) -> Tensor:
    """Mean of each segment (previous boundary, boundary], projected."""
    b = _check_boundaries(boundaries, h.shape[0])
    if not b.size:
        return Tensor(np.zeros((0, proj.shape[1]), dtype=h.dtype))
    seg = np.searchsorted(b, np.arange(h.shape[0]), side="left")
    seg = np.where(seg < b.size, seg, -1)
    return nx.segment_mean(h, seg, b.size) @ proj


def assign_offsets(boundaries, n_fine: int, commits=None):
    """Coarse source, in-segment offset and first-use flag of every fine row.

    Coarse row ``b`` becomes readable at fine index ``commits[b]`` (default
    ``boundaries[b] + 1``); each fine row reads the latest readable one, or
    the init vector (source -1) before any.
    """
    b = list(np.asarray(boundaries, dtype=np.int64).reshape(-1))
    commits = [x + 1 for x in b] if commits is None else list(commits)
    src, offset, first, _ = _row_link(b, commits, n_fine)
    return src, offset, first


def upsample_multilinear(c: Tensor, boundaries, n_fine: int, maps: Tensor, init: Tensor,
                         commits=None) -> Tensor:
    """Fine rows ``maps[p](c[b])``, ``p`` the clamped offset past boundary ``b``."""
    src, off, _ = assign_offsets(boundaries, n_fine, commits)
    off = np.minimum(off, maps.shape[0] - 1)
    table = nx.concat([c, nx.reshape(init, (1, init.shape[-1]))], axis=0)
    return nx.multilinear(nx.gather_rows(table, np.where(src >= 0, src, c.shape[0])), off, maps)


def upsample_repeat(c: Tensor, boundaries, n_fine: int, proj: Tensor, bias: Tensor, init: Tensor,
                    commits=None) -> Tensor:
    """One shared projection of ``c[b]`` repeated, plus a bias per offset."""
    src, off, _ = assign_offsets(boundaries, n_fine, commits)
    off = np.minimum(off, bias.shape[0] - 1)
    table = nx.concat([c, nx.reshape(init, (1, init.shape[-1]))], axis=0)
    z = nx.gather_rows(table, np.where(src >= 0, src, c.shape[0])) @ proj
    return z + nx.gather_rows(bias, off)


def upsample_simple(c: Tensor, boundaries, n_fine: int, proj: Tensor, commits=None) -> Tensor:
    """``proj(c[b])`` at the first fine row allowed to read it, zero elsewhere."""
    src, _, first = assign_offsets(boundaries, n_fine, commits)
    if not c.shape[0]:
        return Tensor(np.zeros((n_fine, proj.shape[1]), dtype=proj.dtype))
    z = nx.gather_rows(c, np.maximum(src, 0)) @ proj
    return z * (first & (src >= 0)).astype(z.dtype)[:, None]


def build_layout(cfg: AUNetConfig, segmaps: list[SegmentMap], seq_len: int) -> Layout:
    """Position bookkeeping for a batch of rows of ``seq_len`` bytes.

    Stage ``s`` is padded to ``min(max_len_s, seq_len)`` rows; boundaries past
    a stage's ``max_len`` are dropped, and deeper stages only keep boundaries
    that survived above them.
    """
    n = cfg.n_stages
    if seq_len > cfg.stages[0].max_len:
        raise ValueError(f"sequence of {seq_len} bytes exceeds stage-1 max_len {cfg.stages[0].max_len}")
    lengths = [seq_len] + [min(st.max_len, seq_len) for st in cfg.stages[1:]]
    per_row = []
    for smap in segmaps:
        if smap.n_bytes < seq_len:
            raise ValueError(f"segment map covers {smap.n_bytes} bytes, row has {seq_len}")
        if smap.n_stages < n:
            raise ValueError(f"segment map has {smap.n_stages} stages, model needs {n}")
        fine_pos = list(range(seq_len))
        row_links, row_pos = [], []
        for s in range(1, n):
            cap = cfg.stages[s].max_len
            if s == 1:
                bl = [b for b in smap.stage(2) if b < seq_len][:cap]
                pool = bl
                commits = smap.commits[: len(bl)]
            else:
                cand = set(smap.stage(s + 1))
                pool = [i for i, b in enumerate(fine_pos) if b in cand][:cap]
                commits = [i + 1 for i in pool]
                bl = [fine_pos[i] for i in pool]
            row_links.append((pool, _row_link(pool, commits, lengths[s - 1])))
            row_pos.append(bl)
            fine_pos = bl
        per_row.append((row_links, row_pos))

    links = []
    for s in range(1, n):
        nf, nc = lengths[s - 1], lengths[s]
        b = len(segmaps)
        pool_idx = np.zeros((b, nc), dtype=np.int64)
        n_real = np.zeros(b, dtype=np.int64)
        arrs = {k: np.zeros((b, nf), dtype=np.int64) for k in ("src", "offset", "seg")}
        first = np.zeros((b, nf), dtype=bool)
        for r, (row_links, _) in enumerate(per_row):
            pool, (src, offset, fst, seg) = row_links[s - 1]
            pool_idx[r, : len(pool)] = pool
            n_real[r] = len(pool)
            arrs["src"][r], arrs["offset"][r], arrs["seg"][r], first[r] = src, offset, seg, fst
        links.append(StageLink(nf, nc, pool_idx, n_real, arrs["seg"], arrs["src"], arrs["offset"], first))
    return Layout(lengths=lengths, positions=[p for _, p in per_row], links=links)


def count_parameters(cfg: AUNetConfig) -> int:
    """Closed-form count: layers with their norm gains, embedding, head,
    final norm, pooling projections and upsampling maps."""
    st = cfg.stages
    total = cfg.vocab * st[0].dim * 2 + st[0].dim
    for sc in st:
        total += sc.n_layers * layer_param_count(sc.dim, sc.ffn, norms=True)
    p = cfg.multilinear_max_positions
    for a, b in zip(st, st[1:]):
        total += a.dim * b.dim
        total += (p if cfg.upsampling == "multilinear" else 1) * b.dim * a.dim
        total += p * a.dim if cfg.upsampling == "repeat" else 0
        total += b.dim if cfg.upsampling != "simple" else 0
    return total


class AUNet:
    """Parameters and forward pass of the hierarchical model.

    Parameters live in :attr:`params`, a name-to-tensor dict; the per-stage
    :class:`StageWeights` views share those tensors.
    """

    def __init__(self, cfg: AUNetConfig, seed: int = 0):
        self.cfg = cfg
        self.dtype = np.dtype(cfg.dtype)
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        st, std = cfg.stages, cfg.init_std
        d1 = st[0].dim

        def new(name, arr):
            t = Tensor(np.asarray(arr, dtype=self.dtype), requires_grad=True, name=name)
            self.params[name] = t
            return t

        def stage_block(i, depth, tag):
            sc = st[i]
            w = init_stage(rng, sc.dim, depth, sc.ffn, sc.head_dim, sc.window, std, cfg.norm_eps,
                           cfg.rope_base, self.dtype)
            for name, t in w.named_parameters(f"s{i + 1}.{tag}."):
                t.name = name
                self.params[name] = t
            return w

        new("embed", rng.normal(0.0, std, (cfg.vocab, d1)))
        self.down: list[StageWeights] = []
        self.up: list[StageWeights | None] = []
        for i, sc in enumerate(st):
            self.down.append(stage_block(i, sc.layers, "down"))
        for i in range(cfg.n_stages - 1):
            fine, coarse = st[i].dim, st[i + 1].dim
            new(f"pool{i + 1}.proj", rng.normal(0.0, std, (fine, coarse)))
            p = cfg.multilinear_max_positions
            if cfg.upsampling == "multilinear":
                new(f"up{i + 1}.maps", rng.normal(0.0, std, (p, coarse, fine)))
            else:
                new(f"up{i + 1}.proj", rng.normal(0.0, std, (coarse, fine)))
            if cfg.upsampling == "repeat":
                new(f"up{i + 1}.bias", np.zeros((p, fine)))
            if cfg.upsampling != "simple":
                new(f"up{i + 1}.init", rng.normal(0.0, std, (coarse,)))
        for i in range(cfg.n_stages - 1):
            self.up.append(stage_block(i, st[i].layers_up, "up"))
        self.up.append(None)
        new("norm", np.ones(d1))
        new("head", rng.normal(0.0, std, (d1, cfg.vocab)))

    # -- bookkeeping ---------------------------------------------------------
    def named_parameters(self):
        return list(self.params.items())

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def expected_num_parameters(self) -> int:
        return count_parameters(self.cfg)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, t in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != t.shape:
                raise nx.ShapeError(f"{k}: checkpoint shape {arr.shape}, model shape {t.shape}")
            t.data = np.ascontiguousarray(arr, dtype=self.dtype)

    # -- pooling and upsampling ---------------------------------------------
    def pool(self, fine: Tensor, link: StageLink, s: int) -> Tensor:
        """Fine rows [B, n_fine, d_s] to coarse rows [B, n_coarse, d_{s+1}]."""
        b, nf, d = fine.shape
        flat = nx.reshape(fine, (b * nf, d))
        rows = np.arange(b)[:, None]
        if self.cfg.pooling == "select":
            picked = nx.gather_rows(flat, link.pool_idx + rows * nf)
        else:
            seg = np.where(link.seg >= 0, link.seg + rows * link.n_coarse, -1).reshape(-1)
            picked = nx.reshape(nx.segment_mean(flat, seg, b * link.n_coarse), (b, link.n_coarse, d))
        return picked @ self.params[f"pool{s}.proj"]

    def upsample_rows(self, coarse_flat: Tensor, src_flat: np.ndarray, offset: np.ndarray,
                      first: np.ndarray, s: int) -> Tensor:
        """Expand coarse rows [M, d_{s+1}] to fine rows [len(src_flat), d_s].

        ``src_flat`` indexes ``coarse_flat``; -1 selects the init vector.
        """
        cfg = self.cfg
        off = np.minimum(offset.reshape(-1), cfg.multilinear_max_positions - 1)
        src_flat = src_flat.reshape(-1)
        m = coarse_flat.shape[0]
        if cfg.upsampling == "simple":
            z = nx.gather_rows(coarse_flat, np.maximum(src_flat, 0)) @ self.params[f"up{s}.proj"]
            keep = (first.reshape(-1) & (src_flat >= 0)).astype(self.dtype)
            return z * keep[:, None]
        init = nx.reshape(self.params[f"up{s}.init"], (1, coarse_flat.shape[1]))
        table = nx.concat([coarse_flat, init], axis=0)
        z = nx.gather_rows(table, np.where(src_flat >= 0, src_flat, m))
        if cfg.upsampling == "multilinear":
            return nx.multilinear(z, off, self.params[f"up{s}.maps"])
        return z @ self.params[f"up{s}.proj"] + nx.gather_rows(self.params[f"up{s}.bias"], off)

    def upsample(self, coarse: Tensor, link: StageLink, s: int) -> Tensor:
        b, nc, dc = coarse.shape
        rows = np.arange(b)[:, None]
        src = np.where(link.src >= 0, link.src + rows * nc, -1)
        out = self.upsample_rows(nx.reshape(coarse, (b * nc, dc)), src, link.offset, link.first, s)
        return nx.reshape(out, (b, link.n_fine, out.shape[-1]))

    # -- forward -------------------------------------------------------------
    def segment(self, ids: np.ndarray) -> list[SegmentMap]:
        return [split(bytes(row.astype(np.uint8)), self.cfg.splitter, n_stages=max(self.cfg.n_stages, 2))
                for row in ids]

    def forward(self, ids, segmaps: list[SegmentMap] | None = None,
                coarse_masks: dict[int, np.ndarray] | None = None, return_layout: bool = False):
        """Logits [B, S, vocab] for byte ids [B, S] (or [S], giving [S, vocab]).

        ``coarse_masks`` maps a stage number (2 and up) to a [B, n_s] array
        multiplied into that stage's output before it is expanded upward;
        it exists for probing which outputs reach which bytes.
        """
        ids = np.asarray(ids, dtype=np.int64)
        squeeze = ids.ndim == 1
        if squeeze:
            ids = ids[None]
        cfg = self.cfg
        b, s_len = ids.shape
        layout = None
        if cfg.n_stages > 1:
            if segmaps is None:
                segmaps = self.segment(ids)
            layout = build_layout(cfg, segmaps, s_len)
        elif s_len > cfg.stages[0].max_len:
            raise ValueError(f"sequence of {s_len} bytes exceeds stage-1 max_len {cfg.stages[0].max_len}")

        x = nx.embedding(self.params["embed"], ids)
        skips = []
        for i in range(cfg.n_stages - 1):
            x = stage_forward(x, self.down[i])
            skips.append(x)
            x = self.pool(x, layout.links[i], i + 1)
        x = stage_forward(x, self.down[-1])
        for i in range(cfg.n_stages - 2, -1, -1):
            if coarse_masks and (i + 2) in coarse_masks:
                mask = np.asarray(coarse_masks[i + 2], dtype=self.dtype)
                x = x * mask.reshape(b, -1)[..., None]
            x = self.upsample(x, layout.links[i], i + 1) + skips[i]
            x = stage_forward(x, self.up[i])
        x = nx.rms_norm(x, self.params["norm"], cfg.norm_eps)
        logits = x @ self.params["head"]
        if squeeze:
            logits = nx.reshape(logits, logits.shape[1:])
        return (logits, layout) if return_layout else logits

    __call__ = forward

    def loss(self, ids, targets, segmaps=None, ignore_index: int = -100) -> Tensor:
        logits = self.forward(ids, segmaps)
        return nx.cross_entropy_logits(logits, targets, ignore_index)

