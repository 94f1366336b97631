"""Low-rank adapters with classic (alpha / r) and rank-stabilized (alpha / sqrt(r)) scaling."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import PROJECTIONS, ConfigError, Model
from .tensor import DimensionError, Tensor

SCHEMES = ("lora", "rslora")


@dataclass(frozen=True)
class AdapterConfig:
    rank: int = 8
    alpha: float | None = None  # None -> 2 * rank
    scheme: str = "rslora"
    dropout_p: float = 0.1
    targets: tuple[str, ...] = ("q", "k", "v", "o")

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(self.targets))
        if self.alpha is None:
            object.__setattr__(self, "alpha", float(2 * self.rank))
        if self.rank < 1:
            raise ConfigError(f"adapter rank must be >= 1, got {self.rank}")
        if self.alpha <= 0:
            raise ConfigError(f"adapter alpha must be > 0, got {self.alpha}")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"adapter scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"adapter dropout must lie in [0, 1), got {self.dropout_p}")
        if not self.targets:
            raise ConfigError("adapter target set is empty")
        unknown = set(self.targets) - set(PROJECTIONS)
        if unknown:
            raise ConfigError(f"unknown adapter targets {sorted(unknown)}; choose from {PROJECTIONS}")

    @property
    def scale(self) -> float:
        return adapter_scale(self.rank, self.alpha, self.scheme)

    def to_dict(self) -> dict:
        return {
            "rank": self.rank, "alpha": self.alpha, "scheme": self.scheme,
            "dropout_p": self.dropout_p, "targets": list(self.targets),
        }


def adapter_scale(rank: int, alpha: float, scheme: str) -> float:
    if scheme == "lora":
        return alpha / rank
    if scheme == "rslora":
        return alpha / math.sqrt(rank)
    raise ConfigError(f"unknown adapter scheme {scheme!r}")


@dataclass
class LoraAdapter:
    """Frozen base weight ``W0`` plus trainable low-rank factors ``A`` (d_in x r), ``B`` (r x d_out)."""

    A: Tensor
    B: Tensor
    base: Tensor
    config: AdapterConfig
    scale: float = field(init=False)

    def __post_init__(self):
        self.scale = self.config.scale
        if self.A.shape != (self.base.shape[0], self.config.rank) or self.B.shape != (
            self.config.rank, self.base.shape[1]
        ):
            raise DimensionError(
                f"adapter factors {self.A.shape} x {self.B.shape} do not fit base {self.base.shape}"
            )

    @property
    def d_in(self) -> int:
        return self.base.shape[0]

    @property
    def d_out(self) -> int:
        return self.base.shape[1]

    def forward(self, x: Tensor, mode: str = "eval", rng=None) -> Tensor:
        return adapter_forward(self, x, mode, rng)

    def num_trainable(self) -> int:
        return self.A.size + self.B.size


def init_adapter(
    d_in: int, d_out: int, config: AdapterConfig, seed: int = 0, base: Tensor | None = None
) -> LoraAdapter:
    if d_in < 1 or d_out < 1:
        raise DimensionError(f"adapter dimensions must be positive, got {d_in} x {d_out}")
    rng = np.random.default_rng(seed)
    A = Tensor(rng.normal(0.0, 0.02, size=(d_in, config.rank)), requires_grad=True)
    B = Tensor(np.zeros((config.rank, d_out)), requires_grad=True)
    if base is None:
        base = Tensor(np.zeros((d_in, d_out)))
    base.requires_grad = False
    return LoraAdapter(A=A, B=B, base=base, config=config)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout with a mask drawn from ``rng``."""
    if p == 0.0:
        return x
    keep = rng.random(x.shape) >= p
    return T.mul(x, Tensor(keep / (1.0 - p)))


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def adapter_forward(adapter: LoraAdapter, x: Tensor, mode: str = "eval", rng=None) -> Tensor:
    """x W0 + scale * (dropout(x) A) B; dropout only in train mode."""
    if x.ndim != 2 or x.shape[1] != adapter.d_in:
        raise DimensionError(f"adapter expects (n, {adapter.d_in}) input, got {x.shape}")
    base_out = x @ adapter.base
    branch_in = x
    if mode == "train" and adapter.config.dropout_p > 0:
        branch_in = dropout(x, adapter.config.dropout_p, _as_rng(rng))
    branch = (branch_in @ adapter.A) @ adapter.B
    return base_out + branch * adapter.scale


def branch_delta(adapter: LoraAdapter) -> np.ndarray:
    return adapter.scale * (adapter.A.data @ adapter.B.data)


def merge_adapter(adapter: LoraAdapter) -> Tensor:
    """Single weight equivalent to the eval-mode adapter."""
    return Tensor(adapter.base.data + branch_delta(adapter))


def attach_adapters(model: Model, config: AdapterConfig, seed: int = 0) -> Model:
    """Wrap every targeted projection of every layer; freezes all base parameters."""
    if not config.targets:
        raise ConfigError("adapter target set is empty")
    for p in model.params.values():
        p.requires_grad = False
    seeds = np.random.SeedSequence(seed).generate_state(model.config.n_layers * len(PROJECTIONS))
    for i in range(model.config.n_layers):
        for j, target in enumerate(PROJECTIONS):
            if target not in config.targets:
                continue
            name = f"layers.{i}.{target}"
            base = model.params[name]
            model.adapters[name] = init_adapter(
                base.shape[0], base.shape[1], config,
                seed=int(seeds[i * len(PROJECTIONS) + j]), base=base,
            )
    return model


def merge_all(model: Model) -> Model:
    """Fold every adapter into its base weight and drop the adapters (in place)."""
    for name, adapter in model.adapters.items():
        model.params[name] = merge_adapter(adapter)
    model.adapters = {}
    return model


def count_trainable(model: Model) -> int:
    return int(np.sum([p.size for p in model.trainable_parameters().values()], dtype=np.int64))
