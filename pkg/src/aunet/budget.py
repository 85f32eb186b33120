"""Compute accounting and hyperparameter scaling laws.

Training compute is ``C = F * N`` with ``F`` the FLOPs per input unit (token
or byte) and ``N`` the number of units seen. For a transformer
``F = 6 * N_params + 6 * d * L * S``: the linear term counts every weight
except the input embedding table (the output head is included) and the
attention term covers a span of ``S`` positions. A hierarchical model adds
up its stages, each divided by how many bytes one of its positions stands
for.
"""

from __future__ import annotations

from dataclasses import dataclass
from decimal import Decimal

from .config import AUNetConfig
from .numerics import ConfigError

BYTES_PER_TOKEN = 4.56  # average compression of the reference BPE tokenizer


@dataclass(frozen=True)
class FlopSpec:
    """One transformer stack: width, depth, attention span and parameters."""

    d: int
    L: int
    S: float
    n_params: int  # excluding the input embedding, including the output head

    def __post_init__(self):
        if self.d <= 0 or self.L < 0 or self.S <= 0 or self.n_params <= 0:
            raise ConfigError(f"invalid FlopSpec {self}")

    @classmethod
    def transformer(cls, d: int, L: int, ffn: int, S: float, head_vocab: int = 0) -> FlopSpec:
        """Standard block (4 d^2 + 3 d ffn weights per layer) plus an optional head."""
        return cls(d=d, L=L, S=S, n_params=L * (4 * d * d + 3 * d * ffn) + head_vocab * d)


@dataclass(frozen=True)
class ScalingFit:
    """``BSZ(C) = A C^alpha`` (units per step) and ``LR(C) = B C^beta``."""

    A: float
    alpha: float
    B: float
    beta: float

    def __post_init__(self):
        if self.A <= 0 or self.B <= 0 or self.alpha <= 0 or self.beta >= 0:
            raise ConfigError(f"invalid scaling fit {self}")


AUNET_FIT = ScalingFit(A=0.66, alpha=0.321, B=6.6, beta=-0.176)
BPE_FIT = ScalingFit(A=29.9, alpha=0.231, B=19.3, beta=-0.177)
FITS = {"aunet": AUNET_FIT, "bpe": BPE_FIT}


def flops_per_token(spec: FlopSpec) -> float:
    return 6.0 * spec.n_params + 6.0 * spec.d * spec.L * spec.S


def flops_per_byte_aunet(stages: list[FlopSpec], k: list[float]) -> float:
    """Sum of every stage's FLOPs per position divided by its contraction factor."""
    if len(stages) != len(k):
        raise ConfigError(f"{len(stages)} stages but {len(k)} contraction factors")
    if not k or k[0] != 1 or any(x < 1 for x in k):
        raise ConfigError(f"contraction factors must start at 1 and be >= 1, got {k}")
    return sum(flops_per_token(s) / ki for s, ki in zip(stages, k))


def stage_specs(dims, layers, ffn, k, window: int, seq_len: int, vocab: int = 256) -> list[FlopSpec]:
    """Per-stage FlopSpecs: stage 1 attends over its window and carries the head;
    deeper stages attend over their pooled length ``seq_len / k_i``."""
    out = []
    for i, (d, L, f) in enumerate(zip(dims, layers, ffn)):
        span = window if i == 0 else seq_len / k[i]
        out.append(FlopSpec.transformer(d, L, f, span, head_vocab=vocab if i == 0 else 0))
    return out


def flops_for_config(cfg: AUNetConfig, k: list[float]) -> float:
    """FLOPs per byte of a configured model (both blocks of a stage count)."""
    if len(k) != cfg.n_stages:
        raise ConfigError(f"{cfg.n_stages} stages but {len(k)} contraction factors")
    st = cfg.stages
    specs = stage_specs([s.dim for s in st], [s.n_layers for s in st], [s.ffn for s in st], k,
                        st[0].window, st[0].max_len, cfg.vocab)
    return flops_per_byte_aunet(specs, list(k))


def _square(k: float) -> float:
    """``k^2`` from the shortest decimal form of ``k``, so 4.56 gives exactly 20.7936."""
    return float(Decimal(repr(float(k))) ** 2)


def gamma_convert(gamma_token: float, k: float) -> float:
    """Data-to-model ratio in bytes from the one in tokens: ``k^2 * gamma``."""
    if k <= 0:
        raise ConfigError(f"compression k must be positive, got {k}")
    if gamma_token <= 0:
        raise ConfigError(f"gamma must be positive, got {gamma_token}")
    return _square(k) * gamma_token


def gamma_to_token(gamma_byte: float, k: float) -> float:
    if k <= 0:
        raise ConfigError(f"compression k must be positive, got {k}")
    return gamma_byte / _square(k)


def predict_bsz(C: float, fit: ScalingFit) -> float:
    if C <= 0:
        raise ConfigError("compute budget must be positive")
    return fit.A * C ** fit.alpha


def predict_lr(C: float, fit: ScalingFit) -> float:
    if C <= 0:
        raise ConfigError("compute budget must be positive")
    return fit.B * C ** fit.beta


def tokens_for_budget(C: float, F: float) -> float:
    """Training units ``N = C / F``."""
    if C <= 0 or F <= 0:
        raise ConfigError("C and F must be positive")
    return C / F


def budget_for_gamma(F: float, gamma: float) -> tuple[float, float]:
    """Units ``N = gamma * F`` and compute ``C = F * N`` for a data-to-model ratio."""
    n = gamma * F
    return n, F * n
