"""Byte-sequence splitting into word, two-word and four-word segments.

The first level is a pre-tokenisation pattern with six alternatives, tried in
order at each position::

     ?\\p{L}{1,16}                          letters, optional leading space
    \\p{N}{1,3}                             digits
     ?[^\\s\\p{L}\\p{N}]{1,3}+[\\r\\n]*         punctuation, trailing line breaks
    \\s*[\\r\\n]                              whitespace ending in a line break
    \\s+(?!\\S)                              whitespace not followed by text
    \\s+                                    any other whitespace

Matching is done by a hand-written streaming matcher rather than a regex
engine: it consumes one byte at a time and commits a match only once no
continuation of the input could change it. Each boundary therefore carries the
byte index at which it was committed, which is what keeps the hierarchical
model causal and lets decoding agree with a full forward pass.

Bytes are read as UTF-8; each byte of an invalid sequence becomes a single
opaque symbol of the punctuation class. Character classes come from the
interpreter's Unicode database.
"""

from __future__ import annotations

import codecs
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import regex

DEFAULT_PATTERN = (
    r" ?\p{L}{1,16}|\p{N}{1,3}| ?[^\s\p{L}\p{N}]{1,3}+[\r\n]*|\s*[\r\n]|\s+(?!\S)|\s+"
)
GREEDY_PATTERN = DEFAULT_PATTERN.replace("{1,3}+", "{1,3}")

SENTENCE_END = frozenset(b".!?\n")

# Unicode White_Space, which is what \s means in the pattern.
_WHITESPACE = frozenset(
    chr(c) for c in (0x09, 0x0A, 0x0B, 0x0C, 0x0D, 0x20, 0x85, 0xA0, 0x1680, *range(0x2000, 0x200B),
                     0x2028, 0x2029, 0x202F, 0x205F, 0x3000)
)

# character classes seen by the matcher
LETTER, DIGIT, SPACE, NEWLINE, BLANK, PUNCT = "L", "N", " ", "R", "W", "P"
_WS_CLASSES = (SPACE, NEWLINE, BLANK)
_MORE = object()  # lookahead past the available input
_END = "$"

MAX_LETTERS = 16
MAX_DIGITS = 3
MAX_PUNCT = 3


class SplitError(ValueError):
    """Invalid splitter configuration or input."""


def char_class(ch: str) -> str:
    if ch == " ":
        return SPACE
    if ch in "\r\n":
        return NEWLINE
    if ch in _WHITESPACE:
        return BLANK
    cat = unicodedata.category(ch)
    if cat[0] == "L":
        return LETTER
    if cat[0] == "N":
        return DIGIT
    return PUNCT


def _match_at(cls: Sequence[str], s: int, eof: bool):
    """Last char index of the match starting at ``s``, or None if undecided."""
    n = len(cls)

    def at(i):
        if i < n:
            return cls[i]
        return _END if eof else _MORE

    def run(start, kind, cap=None):
        i = start
        while cap is None or i - start < cap:
            c = at(i)
            if c is _MORE:
                return None
            if c != kind:
                break
            i += 1
        return i - 1

    c0 = at(s)
    if c0 is _MORE:
        return None
    c1 = None
    if c0 == SPACE:
        c1 = at(s + 1)
        if c1 is _MORE:
            return None
    # letters, optional leading space
    if c0 == LETTER or c1 == LETTER:
        return run(s if c0 == LETTER else s + 1, LETTER, MAX_LETTERS)
    if c0 == DIGIT:
        return run(s, DIGIT, MAX_DIGITS)
    # punctuation (the {1,3} run never gives characters back, so greedy and
    # possessive readings agree), then any line breaks
    if c0 == PUNCT or c1 == PUNCT:
        end = run(s if c0 == PUNCT else s + 1, PUNCT, MAX_PUNCT)
        if end is None:
            return None
        return run(end + 1, NEWLINE)
    # whitespace: decided only once the run ends
    i = s
    while True:
        c = at(i)
        if c is _MORE:
            return None
        if c not in _WS_CLASSES:
            break
        i += 1
    last = i - 1
    nexts = at(i)
    for j in range(last, s - 1, -1):
        if cls[j] == NEWLINE:
            return j
    if nexts == _END or last == s:
        return last
    return last - 1


@dataclass
class SplitterConfig:
    """Splitting settings.

    ``group_sizes`` lists the words-per-segment for each stage after the word
    stage (default two and four words). ``possessive`` selects the written
    ``{1,3}+`` quantifier in the reference pattern string.
    """

    group_sizes: list[int] = field(default_factory=lambda: [2, 4])
    sentence_end_bytes: bytes = bytes(sorted(SENTENCE_END))
    possessive: bool = True
    stage1_regex: str | None = None

    def __post_init__(self):
        if any(g <= 0 for g in self.group_sizes):
            raise SplitError(f"group sizes must be positive, got {self.group_sizes}")
        self.sentence_end_bytes = bytes(self.sentence_end_bytes)

    @property
    def pattern(self) -> str:
        if self.stage1_regex:
            return self.stage1_regex
        return DEFAULT_PATTERN if self.possessive else GREEDY_PATTERN

    @property
    def custom(self) -> bool:
        return bool(self.stage1_regex) and self.stage1_regex not in (DEFAULT_PATTERN, GREEDY_PATTERN)


@dataclass
class SegmentMap:
    """Pooling positions for every stage above the byte stage.

    ``boundaries[0]`` are word boundaries, ``boundaries[1]`` the next stage and
    so on. Each entry is the index of the last byte of a segment.
    ``commits[i]`` is the byte index whose arrival made word boundary ``i``
    certain (``n_bytes`` when it was only closed by the end of input).
    """

    n_bytes: int
    boundaries: list[list[int]]
    commits: list[int]

    def stage(self, s: int) -> list[int]:
        """Boundaries of stage ``s`` counted from 1 (stage 1 is the bytes)."""
        if s < 2:
            raise ValueError("stage 1 has no boundaries")
        return self.boundaries[s - 2]

    @property
    def n_stages(self) -> int:
        return len(self.boundaries) + 1


class Hierarchy:
    """Counts word boundaries into the deeper stages, one word at a time."""

    def __init__(self, cfg: SplitterConfig):
        self.cfg = cfg
        self.counts = [0] * len(cfg.group_sizes)
        self._ends = frozenset(cfg.sentence_end_bytes)

    def push(self, segment: bytes) -> int:
        """Number of deeper stages that keep this word boundary."""
        ends = any(b in self._ends for b in segment)
        depth = 0
        for k, g in enumerate(self.cfg.group_sizes):
            self.counts[k] = 0 if ends else self.counts[k] + 1
            if depth == k and (ends or self.counts[k] % g == 0):
                depth += 1
        return depth


class StreamingSplitter:
    """Incremental word splitter over a byte stream.

    :meth:`push` returns the word boundaries (byte indices) committed by the
    new byte, each paired with how many deeper stages keep it.
    """

    def __init__(self, cfg: SplitterConfig | None = None):
        self.cfg = cfg or SplitterConfig()
        if self.cfg.custom:
            raise SplitError("streaming splitting supports only the built-in pattern")
        self._decoder = codecs.getincrementaldecoder("utf-8")("surrogateescape")
        self._cls: list[str] = []
        self._ends: list[int] = []  # last byte index of each char
        self._start = 0  # char index where the open match begins
        self._data = bytearray()
        self._base = 0  # stream index of _data[0]
        self._seg_start = 0  # stream index where the open match begins
        self.hierarchy = Hierarchy(self.cfg)
        self.n_bytes = 0

    def _add_chars(self, text: str) -> None:
        pos = self._ends[-1] + 1 if self._ends else self._seg_start
        for ch in text:
            width = 1 if "\udc80" <= ch <= "\udcff" else len(ch.encode("utf-8"))
            pos += width
            self._ends.append(pos - 1)
            self._cls.append(char_class(ch))

    def _drain(self, eof: bool) -> list[tuple[int, int]]:
        out = []
        while self._start < len(self._cls):
            end = _match_at(self._cls, self._start, eof)
            if end is None:
                break
            byte_end = self._ends[end]
            segment = bytes(self._data[self._seg_start - self._base: byte_end + 1 - self._base])
            out.append((byte_end, self.hierarchy.push(segment)))
            self._seg_start = byte_end + 1
            self._start = end + 1
        if self._start > 4096:
            # keep the buffers short on long streams
            del self._cls[: self._start]
            del self._ends[: self._start]
            del self._data[: self._seg_start - self._base]
            self._base = self._seg_start
            self._start = 0
        return out

    def push(self, byte: int) -> list[tuple[int, int]]:
        if not 0 <= byte < 256:
            raise SplitError(f"byte value out of range: {byte}")
        self._data.append(byte)
        self.n_bytes += 1
        self._add_chars(self._decoder.decode(bytes([byte])))
        return self._drain(eof=False)

    def finish(self) -> list[tuple[int, int]]:
        self._add_chars(self._decoder.decode(b"", final=True))
        return self._drain(eof=True)


def split(data: bytes, cfg: SplitterConfig | None = None, n_stages: int | None = None) -> SegmentMap:
    """Full segment map of ``data`` (boundaries and commit points)."""
    cfg = cfg or SplitterConfig()
    sp = StreamingSplitter(cfg)
    depth_total = len(cfg.group_sizes) if n_stages is None else n_stages - 2
    if depth_total > len(cfg.group_sizes):
        raise SplitError(f"{n_stages} stages need {n_stages - 2} group sizes, have {cfg.group_sizes}")
    bounds: list[list[int]] = [[] for _ in range(depth_total + 1)]
    commits: list[int] = []

    def record(events, at):
        for end, depth in events:
            commits.append(at)
            bounds[0].append(end)
            for k in range(min(depth, depth_total)):
                bounds[k + 1].append(end)

    for i, b in enumerate(data):
        record(sp.push(b), i)
    record(sp.finish(), len(data))
    return SegmentMap(n_bytes=len(data), boundaries=bounds, commits=commits)


def split_stage1(data: bytes, cfg: SplitterConfig | None = None) -> list[int]:
    """Word boundaries of ``data``: the last byte index of every match."""
    cfg = cfg or SplitterConfig()
    if cfg.custom:
        return regex_boundaries(data, cfg.pattern)
    return split(data, cfg, n_stages=2).boundaries[0]


def build_hierarchy(stage1_boundaries: Sequence[int], data: bytes,
                    cfg: SplitterConfig | None = None) -> SegmentMap:
    """Group word boundaries into the deeper stages.

    Stage k keeps every g_k-th word, counting from the last sentence end; a
    word whose segment holds a sentence-end byte is kept at every stage. A
    deeper stage only keeps boundaries the stage above it kept.
    """
    cfg = cfg or SplitterConfig()
    h = Hierarchy(cfg)
    bounds: list[list[int]] = [list(stage1_boundaries)] + [[] for _ in cfg.group_sizes]
    start = 0
    for end in stage1_boundaries:
        depth = h.push(bytes(data[start: end + 1]))
        for k in range(depth):
            bounds[k + 1].append(end)
        start = end + 1
    commits = [min(e + 1, len(data)) for e in stage1_boundaries]
    return SegmentMap(n_bytes=len(data), boundaries=bounds, commits=commits)


def regex_boundaries(data: bytes, pattern: str = DEFAULT_PATTERN) -> list[int]:
    """Word boundaries from the ``regex`` engine (used for custom patterns)."""
    text = data.decode("utf-8", errors="surrogateescape")
    out = []
    pos = 0
    last = 0
    for m in regex.finditer(pattern, text):
        chunk = text[last: m.end()]
        pos += len(chunk.encode("utf-8", errors="surrogateescape"))
        last = m.end()
        if m.end() > m.start():
            out.append(pos - 1)
    return out


def measure_compression(corpus: bytes, tokenizer_lengths: Iterable[int] | None = None,
                        cfg: SplitterConfig | None = None) -> float:
    """Bytes per unit: per supplied token count, else per word segment."""
    if not corpus:
        raise SplitError("cannot measure compression of an empty corpus")
    if tokenizer_lengths is not None:
        units = sum(int(n) for n in tokenizer_lengths)
    else:
        units = len(split_stage1(corpus, cfg))
    if units <= 0:
        raise SplitError("no units to divide by")
    return len(corpus) / units


def segment_histogram(data: bytes, smap: SegmentMap) -> list[Counter]:
    """Segment-length counts (in bytes) for every stage above the bytes."""
    out = []
    for bounds in smap.boundaries:
        prev = -1
        hist: Counter = Counter()
        for b in bounds:
            hist[b - prev] += 1
            prev = b
        out.append(hist)
    return out
