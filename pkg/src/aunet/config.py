"""Model, training and compute-budget configuration with a YAML text form."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .numerics import ConfigError
from .splitter import SplitterConfig


POOLING = ("select", "average")
UPSAMPLING = ("simple", "repeat", "multilinear")
DTYPES = ("float32", "float64")


@dataclass
class StageConfig:
    """One resolution level.

    ``layers`` is the depth of the contracting block (the only block at the
    deepest stage); ``layers_up`` the depth of the expanding block.
    ``window`` None means unbounded attention.
    """

    dim: int
    layers: int
    ffn: int
    head_dim: int
    max_len: int
    layers_up: int = 0
    window: int | None = None

    @property
    def n_layers(self) -> int:
        return self.layers + self.layers_up

    @property
    def n_heads(self) -> int:
        return self.dim // self.head_dim


@dataclass
class AUNetConfig:
    stages: list[StageConfig]
    pooling: str = "select"
    upsampling: str = "multilinear"
    multilinear_max_positions: int = 16
    vocab: int = 256
    norm_eps: float = 1e-5
    rope_base: float = 10000.0
    init_std: float = 0.02
    dtype: str = "float32"
    splitter: SplitterConfig = field(default_factory=SplitterConfig)

    def __post_init__(self):
        self.validate()

    @property
    def n_stages(self) -> int:
        return len(self.stages)

    def validate(self) -> None:
        n = len(self.stages)
        if not 1 <= n <= 4:
            raise ConfigError(f"need 1 to 4 stages, got {n}")
        if self.pooling not in POOLING:
            raise ConfigError(f"pooling must be one of {POOLING}, got {self.pooling!r}")
        if self.upsampling not in UPSAMPLING:
            raise ConfigError(f"upsampling must be one of {UPSAMPLING}, got {self.upsampling!r}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {DTYPES}, got {self.dtype!r}")
        if self.multilinear_max_positions < 1:
            raise ConfigError("multilinear_max_positions must be at least 1")
        if self.vocab < 1:
            raise ConfigError("vocab must be positive")
        for i, st in enumerate(self.stages):
            if min(st.dim, st.ffn, st.head_dim, st.max_len) <= 0 or min(st.layers, st.layers_up) < 0:
                raise ConfigError(f"stage {i + 1}: sizes must be positive")
            if st.dim % st.head_dim:
                raise ConfigError(f"stage {i + 1}: dim {st.dim} not divisible by head_dim {st.head_dim}")
            if st.head_dim % 2:
                raise ConfigError(f"stage {i + 1}: head_dim must be even for rotary positions")
            if st.window is not None and st.window <= 0:
                raise ConfigError(f"stage {i + 1}: window must be positive")
            if i == n - 1 and st.layers_up:
                raise ConfigError("the deepest stage has a single block; set layers_up to 0")
        if self.stages[0].window is None:
            raise ConfigError("stage 1 needs a finite attention window")
        for a, b in zip(self.stages, self.stages[1:]):
            if b.dim < a.dim:
                raise ConfigError("stage dims must not shrink with depth")
            if b.max_len > a.max_len:
                raise ConfigError("stage max_len must not grow with depth")
        if n - 2 > len(self.splitter.group_sizes):
            raise ConfigError(f"{n} stages need {n - 2} splitter group sizes")

    @classmethod
    def from_main_dim(cls, dim: int, n_stages: int, layers: list[int], ffn: list[int] | None = None,
                      head_dims: list[int] | None = None, seq_len: int = 8192, window: int = 512,
                      **kw) -> AUNetConfig:
        """Stage dims [D/4, D, 1.5D, 2.25D] and max lengths [S, S/4, S/8, S/16].

        ``layers`` gives the total depth per stage; non-deepest stages split it
        between the contracting and expanding blocks, the larger half first.
        """
        dims = [dim // 4, dim, dim * 3 // 2, dim * 9 // 4][:n_stages] if n_stages > 1 else [dim]
        lens = [seq_len, seq_len // 4, seq_len // 8, seq_len // 16][:n_stages]
        ffn = ffn or [d * 3 for d in dims]
        head_dims = head_dims or [min(64, d) for d in dims]
        stages = []
        for i, d in enumerate(dims):
            total = layers[i]
            deepest = i == n_stages - 1
            down = total if deepest else total - total // 2
            stages.append(StageConfig(dim=d, layers=down, layers_up=0 if deepest else total // 2, ffn=ffn[i],
                                      head_dim=head_dims[i], max_len=lens[i],
                                      window=window if i == 0 else None))
        return cls(stages=stages, **kw)


@dataclass
class TrainConfig:
    lr_max: float = 3e-3
    bsz: int = 8192  # bytes per step
    seq_len: int = 1024
    total_steps: int = 1000
    warmup_fraction: float = 0.10
    lr_min_fraction: float = 0.01
    weight_decay: float = 0.1
    grad_clip: float = 0.2
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    seed: int = 0
    eval_interval: int = 100
    eval_bytes: int = 65536
    checkpoint_interval: int = 0
    heldout_fraction: float = 0.02
    log_interval: int = 10

    def __post_init__(self):
        if not 0 < self.warmup_fraction < 1:
            raise ConfigError("warmup_fraction must lie in (0, 1)")
        if self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive")
        if self.bsz < self.seq_len or self.bsz % self.seq_len:
            raise ConfigError("bsz (bytes per step) must be a positive multiple of seq_len")
        if self.total_steps <= 0:
            raise ConfigError("total_steps must be positive")

    @property
    def batch_rows(self) -> int:
        return self.bsz // self.seq_len


@dataclass
class BudgetConfig:
    """Compute-accounting inputs: per-stage contraction factors and data ratio."""

    contraction: list[float] = field(default_factory=lambda: [1.0])
    gamma_token: float = 10.0
    arch: str = "aunet"  # which hyperparameter law applies: aunet | bpe


@dataclass
class Config:
    model: AUNetConfig
    train: TrainConfig = field(default_factory=TrainConfig)
    budget: BudgetConfig = field(default_factory=BudgetConfig)


# -- text form -----------------------------------------------------------------

def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, bytes):
        return obj.decode("latin-1")
    if isinstance(obj, (list, tuple)):
        return [_to_plain(x) for x in obj]
    return obj


def config_to_dict(cfg: Config) -> dict:
    return _to_plain(cfg)


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as e:
        raise ConfigError(f"{where}: {e}") from None


def config_from_dict(data: dict) -> Config:
    if not isinstance(data, dict) or "model" not in data:
        raise ConfigError("config needs a 'model' section")
    m = dict(data["model"])
    stages = [_build(StageConfig, s, f"model.stages[{i}]") for i, s in enumerate(m.pop("stages", []))]
    sp = dict(m.pop("splitter", {}) or {})
    if "sentence_end_bytes" in sp:
        sp["sentence_end_bytes"] = str(sp["sentence_end_bytes"]).encode("latin-1")
    splitter = _build(SplitterConfig, sp, "model.splitter")
    model = _build(AUNetConfig, {**m, "stages": stages, "splitter": splitter}, "model")
    train = _build(TrainConfig, data.get("train") or {}, "train")
    budget = _build(BudgetConfig, data.get("budget") or {}, "budget")
    if len(budget.contraction) not in (1, model.n_stages) and "contraction" in (data.get("budget") or {}):
        raise ConfigError("budget.contraction needs one factor per stage")
    return Config(model=model, train=train, budget=budget)


def dumps(cfg: Config) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)


def loads(text: str) -> Config:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"config is not valid YAML: {e}") from None
    return config_from_dict(data)


def load(path: str | Path) -> Config:
    return loads(Path(path).read_text())


def save(cfg: Config, path: str | Path) -> None:
    Path(path).write_text(dumps(cfg))
