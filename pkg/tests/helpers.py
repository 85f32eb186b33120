import csv
from pathlib import Path

import numpy as np

from aunet.config import AUNetConfig, StageConfig
from aunet.hierarchy import AUNet
from aunet.splitter import SplitterConfig

DIMS = [8, 16, 16, 24]
LENS = [256, 64, 32, 16]


def tiny_config(n_stages=2, upsampling="multilinear", pooling="select", dtype="float64", window=6,
                lens=LENS, groups=(2, 2), ffn_mult=2, layers=1):
    stages = [StageConfig(dim=DIMS[i], layers=layers, layers_up=0 if i == n_stages - 1 else layers,
                          ffn=DIMS[i] * ffn_mult, head_dim=4, max_len=lens[i], window=window if i == 0 else None)
              for i in range(n_stages)]
    return AUNetConfig(stages=stages, upsampling=upsampling, pooling=pooling, dtype=dtype,
                       splitter=SplitterConfig(group_sizes=list(groups)), init_std=0.3)


def tiny_model(seed=0, **kw):
    return AUNet(tiny_config(**kw), seed=seed)


WORDS = [b"the", b"cat", b"sat", b"on", b"a", b"mat", b"and", b"we", b"saw", b"42", b"it", b"ran", b"off"]
PUNCT = [b" ", b" ", b" ", b" ", b", ", b". ", b"!\n", b"  "]


def random_text(rng: np.random.Generator, n_bytes: int) -> bytes:
    out = bytearray()
    while len(out) < n_bytes:
        out += WORDS[rng.integers(len(WORDS))] + PUNCT[rng.integers(len(PUNCT))]
    return bytes(out[:n_bytes])


def causal_violation(model, data: bytes, t: int, new_byte: int) -> bool:
    """True if replacing byte ``t`` changes any logit before ``t``."""
    ids = np.frombuffer(data, dtype=np.uint8).astype(np.int64)
    base = model(ids).data
    ids2 = ids.copy()
    ids2[t] = new_byte
    return not np.array_equal(model(ids2).data[:t], base[:t])


def decode_error(model, data: bytes) -> float:
    """Worst relative gap between step-by-step and full-forward logits over every position."""
    from aunet.decode import Decoder, new_state

    full = model(np.frombuffer(data, dtype=np.uint8).astype(np.int64)).data.astype(np.float64)
    dec, state = Decoder(model), new_state(model)
    inc = np.stack([dec.step(state, b) for b in data]).astype(np.float64)
    return float(np.max(np.abs(inc - full)) / max(np.max(np.abs(full)), 1e-30))


# -- published configuration table ------------------------------------------

TABLE = Path(__file__).resolve().parent / "fixtures" / "published_configs.csv"
BASELINE_VOCAB = 128_256
CONTRACTION = [1.0, 4.56, 9.12, 18.24]  # bytes per position at each stage
WINDOW = 512


def load_table() -> list[dict]:
    def ints(v):
        return [int(x) for x in v.split(";")]

    rows = []
    with open(TABLE, newline="") as fh:
        for r in csv.DictReader(fh):
            r = dict(r)
            for k in ("dims", "layers", "head_dims", "ffn"):
                r[k] = ints(r[k])
            for k in ("total_flops", "units_per_step", "flops_per_unit", "lr"):
                r[k] = float(r[k])
            r["nominal_budget"] = float(r["nominal_budget"]) if r["nominal_budget"] else None
            r["seq_len"] = int(r["seq_len"])
            rows.append(r)
    return rows


def replay_flops(row: dict) -> float:
    """FLOPs per unit of a table row under the package's accounting."""
    from aunet import budget

    if row["family"] == "bpe":
        spec = budget.FlopSpec.transformer(row["dims"][0], row["layers"][0], row["ffn"][0], row["seq_len"],
                                           head_vocab=BASELINE_VOCAB)
        return budget.flops_per_token(spec)
    k = CONTRACTION[: len(row["dims"])]
    specs = budget.stage_specs(row["dims"], row["layers"], row["ffn"], k, WINDOW, row["seq_len"])
    return budget.flops_per_byte_aunet(specs, k)


def random_config(rng: np.random.Generator):
    """A valid randomized configuration with small dimensions."""
    from aunet.config import AUNetConfig, BudgetConfig, Config, StageConfig, TrainConfig
    from aunet.splitter import SplitterConfig

    n = int(rng.integers(1, 5))
    dims, lens = [], []
    d, length = 4 * int(rng.integers(1, 5)), 16 * int(rng.integers(2, 9))
    for i in range(n):
        dims.append(d)
        lens.append(length)
        d += 4 * int(rng.integers(0, 3))
        length = max(2, length // int(rng.integers(1, 4)))
    stages = []
    for i in range(n):
        hd = 2 * int(rng.choice([h for h in range(1, dims[i] // 2 + 1) if dims[i] % (2 * h) == 0]))
        stages.append(StageConfig(dim=dims[i], layers=int(rng.integers(0, 3)),
                                  layers_up=0 if i == n - 1 else int(rng.integers(0, 3)),
                                  ffn=int(rng.integers(1, 4)) * dims[i], head_dim=hd, max_len=lens[i],
                                  window=int(rng.integers(1, 64)) if i == 0 else
                                  (None if rng.random() < 0.5 else int(rng.integers(1, 32)))))
    groups = [int(g) for g in rng.integers(1, 5, size=max(n - 2, 0) + int(rng.integers(0, 2)))]
    ends = bytes(sorted(rng.choice(list(b".!?\n;:"), size=int(rng.integers(1, 5)), replace=False)))
    splitter = SplitterConfig(group_sizes=groups or [2], sentence_end_bytes=ends, possessive=bool(rng.random() < 0.5))
    model = AUNetConfig(stages=stages, pooling=str(rng.choice(["select", "average"])),
                        upsampling=str(rng.choice(["simple", "repeat", "multilinear"])),
                        multilinear_max_positions=int(rng.integers(1, 20)), norm_eps=float(10.0 ** -rng.integers(4, 8)),
                        rope_base=float(rng.choice([1e4, 5e5])), init_std=float(rng.uniform(0.01, 0.3)),
                        dtype=str(rng.choice(["float32", "float64"])), splitter=splitter)
    seq = int(rng.integers(1, 9)) * 8
    train = TrainConfig(lr_max=float(rng.uniform(1e-4, 1e-2)), bsz=seq * int(rng.integers(1, 9)), seq_len=seq,
                        total_steps=int(rng.integers(1, 10**6)), warmup_fraction=float(rng.uniform(0.01, 0.5)),
                        seed=int(rng.integers(0, 2**31)))
    budget = BudgetConfig(contraction=[1.0] + [float(x) for x in np.cumprod(rng.uniform(1, 5, size=n - 1))],
                          gamma_token=float(rng.uniform(1, 100)), arch=str(rng.choice(["aunet", "bpe"])))
    return Config(model=model, train=train, budget=budget)


MIXED_FRAGMENTS = [
    "naïve café", " Ünïcödé", " Привет мир", " 東京タワー", " 北京", " 😀🎉", " ½ ⅔", " co-operate", " don't",
    " 3.14159", " 2024-06-01", " $100", " #hashtag", " @user", " x+=1;", " f(x) = y", "\t\tindent", "\r\n",
    "  \n\n", " \u2014 ", "...", "?!", " «quote»", " e.g.", " URL: https://example.org/a?b=c", " 12345678",
]


def mixed_corpus(n_bytes: int = 1_000_000, seed: int = 0) -> bytes:
    """English prose interleaved with code, numbers, non-Latin scripts and invalid UTF-8."""
    import desk_corpus

    rng = np.random.default_rng(seed)
    prose = desk_corpus.load()
    code = Path(np.__file__).read_bytes() + Path(csv.__file__).read_bytes()
    out = bytearray()
    while len(out) < n_bytes:
        kind = rng.random()
        if kind < 0.55:
            a = int(rng.integers(0, len(prose) - 2000))
            out += prose[a: a + int(rng.integers(50, 2000))]
        elif kind < 0.75:
            a = int(rng.integers(0, len(code) - 800))
            out += code[a: a + int(rng.integers(20, 800))]
        elif kind < 0.95:
            out += "".join(rng.choice(MIXED_FRAGMENTS) for _ in range(int(rng.integers(1, 20)))).encode()
        else:
            out += rng.integers(0, 256, int(rng.integers(1, 40)), dtype=np.uint8).tobytes()
    return bytes(out[:n_bytes])
