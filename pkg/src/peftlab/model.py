"""Causal decoder: token embeddings, RoPE, RMSNorm, grouped-query attention, SwiGLU."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from . import tensor as T
from .attention import attention
from .neftune import NoiseConfig, inject_noise
from .tensor import DimensionError, Tensor


class ConfigError(ValueError):
    """A configuration violates one of its invariants."""


class VocabularyError(ValueError):
    pass


class ContextLengthError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    n_kv_heads: int
    head_dim: int
    d_ff: int
    vocab_size: int
    max_context: int
    rope_base: float = 10_000.0
    rmsnorm_eps: float = 1e-6
    dropout_p: float = 0.0

    def __post_init__(self):
        self.validate()

    @property
    def group_size(self) -> int:
        return self.n_heads // self.n_kv_heads

    def validate(self) -> None:
        for name in ("d_model", "n_heads", "n_kv_heads", "head_dim", "d_ff"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n_layers < 0:
            raise ConfigError(f"n_layers must be >= 0, got {self.n_layers}")
        if self.n_heads % self.n_kv_heads:
            raise ConfigError(
                f"n_heads mod n_kv_heads must be 0 ({self.n_heads} mod {self.n_kv_heads} != 0)"
            )
        if self.n_heads * self.head_dim != self.d_model:
            raise ConfigError(
                f"n_heads * head_dim must equal d_model ({self.n_heads} * {self.head_dim} != {self.d_model})"
            )
        if self.n_layers > 0 and self.head_dim % 2:
            raise ConfigError(f"head_dim must be even for rotary embeddings, got {self.head_dim}")
        if self.max_context < 1:
            raise ConfigError(f"max_context must be >= 1, got {self.max_context}")
        if self.vocab_size < 2:
            raise ConfigError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.rope_base <= 0 or self.rmsnorm_eps < 0:
            raise ConfigError("rope_base must be positive and rmsnorm_eps nonnegative")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def qwen3_8b_preset() -> ModelConfig:
    """Architecture shape of Qwen3-8B as published. Shape metadata only."""
    return ModelConfig(
        n_layers=36,
        d_model=5120,
        n_heads=32,
        n_kv_heads=8,
        head_dim=5120 // 32,
        d_ff=13_696,
        vocab_size=151_552,
        max_context=32_768,
    )


def tiny_config(**overrides) -> ModelConfig:
    base = dict(
        n_layers=2, d_model=64, n_heads=4, n_kv_heads=2, head_dim=16,
        d_ff=128, vocab_size=256, max_context=512,
    )
    base.update(overrides)
    return ModelConfig(**base)


# projection name -> (rows, cols) as a function of the config
def _projection_shapes(c: ModelConfig) -> dict[str, tuple[int, int]]:
    return {
        "q": (c.d_model, c.n_heads * c.head_dim),
        "k": (c.d_model, c.n_kv_heads * c.head_dim),
        "v": (c.d_model, c.n_kv_heads * c.head_dim),
        "o": (c.n_heads * c.head_dim, c.d_model),
        "gate": (c.d_model, c.d_ff),
        "up": (c.d_model, c.d_ff),
        "down": (c.d_ff, c.d_model),
    }


PROJECTIONS = ("q", "k", "v", "o", "gate", "up", "down")


def parameter_shapes(c: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {"embed": (c.vocab_size, c.d_model)}
    proj = _projection_shapes(c)
    for i in range(c.n_layers):
        shapes[f"layers.{i}.attn_norm"] = (c.d_model,)
        for name in ("q", "k", "v", "o"):
            shapes[f"layers.{i}.{name}"] = proj[name]
        shapes[f"layers.{i}.ffn_norm"] = (c.d_model,)
        for name in ("gate", "up", "down"):
            shapes[f"layers.{i}.{name}"] = proj[name]
    shapes["final_norm"] = (c.d_model,)
    shapes["head"] = (c.d_model, c.vocab_size)
    return shapes


def estimate_param_count(c: ModelConfig) -> int:
    """Closed-form parameter count of :func:`build_model` for ``c``."""
    attn = c.d_model * c.head_dim * (2 * c.n_heads + 2 * c.n_kv_heads)
    ffn = 3 * c.d_model * c.d_ff
    per_layer = attn + ffn + 2 * c.d_model
    return 2 * c.vocab_size * c.d_model + c.d_model + c.n_layers * per_layer


class Model:
    """Parameter container plus optional low-rank adapters keyed by projection name."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self.adapters: dict = {}
        self.attention_kernel = "streaming"
        self.block_size = 32

    def parameters(self) -> dict[str, Tensor]:
        out = dict(self.params)
        for name, adapter in self.adapters.items():
            out[f"{name}.lora_A"] = adapter.A
            out[f"{name}.lora_B"] = adapter.B
        return out

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {k: p for k, p in self.parameters().items() if p.requires_grad}

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def num_parameters(self) -> int:
        return int(np.sum([p.size for p in self.params.values()]))

    def project(self, name: str, x: Tensor, mode: str, rng) -> Tensor:
        adapter = self.adapters.get(name)
        if adapter is not None:
            return adapter.forward(x, mode=mode, rng=rng)
        return x @ self.params[name]


def build_model(config: ModelConfig, seed: int = 0) -> Model:
    config.validate()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith("norm"):
            data = np.ones(shape)
        else:
            data = rng.normal(0.0, 0.02, size=shape)
        params[name] = Tensor(data, requires_grad=True)
    return Model(config, params)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------
def rope_apply(x: Tensor, positions: Sequence[int], base: float = 10_000.0) -> Tensor:
    """Rotate each interleaved pair (x[2i], x[2i+1]) by pos * base**(-2i/head_dim)."""
    if x.ndim != 3:
        raise DimensionError(f"rope_apply expects (seq, heads, head_dim), got {x.shape}")
    seq, _, hd = x.shape
    if hd % 2:
        raise ConfigError(f"head_dim must be even for rotary embeddings, got {hd}")
    pos = np.asarray(positions, dtype=np.float64)
    if pos.shape != (seq,):
        raise DimensionError(f"{pos.size} positions for sequence length {seq}")
    inv_freq = base ** (-np.arange(0, hd, 2, dtype=np.float64) / hd)
    angles = pos[:, None] * inv_freq[None, :]
    cos = np.cos(angles)[:, None, :]
    sin = np.sin(angles)[:, None, :]

    def rotate(a, sign):
        even, odd = a[..., 0::2], a[..., 1::2]
        out = np.empty_like(a)
        out[..., 0::2] = even * cos - sign * odd * sin
        out[..., 1::2] = sign * even * sin + odd * cos
        return out

    return Tensor.from_op(rotate(x.data, 1.0), (x,), lambda g: (rotate(g, -1.0),), "rope")


def rmsnorm(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    """x / sqrt(mean(x**2) + eps) * weight along the trailing axis."""
    if weight.ndim != 1 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"rmsnorm: input {x.shape} vs weight {weight.shape}")
    xd, w = x.data, weight.data
    r = 1.0 / np.sqrt(np.mean(xd * xd, axis=-1, keepdims=True) + eps)
    xhat = xd * r

    def _back(g):
        gw = (g * xhat).reshape(-1, w.size).sum(axis=0) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * w
            gx = r * (gh - xhat * np.mean(gh * xhat, axis=-1, keepdims=True))
        return gx, gw

    return Tensor.from_op(xhat * w, (x, weight), _back, "rmsnorm")


def swiglu_ffn(x: Tensor, gate: Tensor, up: Tensor, down: Tensor) -> Tensor:
    return T.mul(T.silu(x @ gate), x @ up) @ down


def _swiglu_projected(model: Model, prefix: str, x: Tensor, mode: str, rng) -> Tensor:
    g = model.project(prefix + "gate", x, mode, rng)
    u = model.project(prefix + "up", x, mode, rng)
    return model.project(prefix + "down", T.mul(T.silu(g), u), mode, rng)


def _attention_block(model: Model, prefix: str, x: Tensor, positions, mode: str, rng) -> Tensor:
    c = model.config
    seq = x.shape[0]
    q = model.project(prefix + "q", x, mode, rng)
    k = model.project(prefix + "k", x, mode, rng)
    v = model.project(prefix + "v", x, mode, rng)
    q = rope_apply(T.reshape(q, (seq, c.n_heads, c.head_dim)), positions, c.rope_base)
    k = rope_apply(T.reshape(k, (seq, c.n_kv_heads, c.head_dim)), positions, c.rope_base)
    v = T.reshape(v, (seq, c.n_kv_heads, c.head_dim))
    ks = [k[:, j, :] for j in range(c.n_kv_heads)]
    vs = [v[:, j, :] for j in range(c.n_kv_heads)]
    heads = []
    for h in range(c.n_heads):
        j = h // c.group_size
        heads.append(
            attention(q[:, h, :], ks[j], vs[j], causal=True,
                      kernel=model.attention_kernel, block_size=model.block_size)
        )
    return model.project(prefix + "o", T.concat(heads, axis=1), mode, rng)


def embed_tokens(model: Model, tokens: Sequence[int]) -> Tensor:
    c = model.config
    tokens = [int(t) for t in tokens]
    if not tokens:
        raise ValueError("forward needs at least one token")
    if len(tokens) > c.max_context:
        raise ContextLengthError(f"sequence of {len(tokens)} tokens exceeds max_context {c.max_context}")
    bad = [t for t in tokens if not 0 <= t < c.vocab_size]
    if bad:
        raise VocabularyError(f"token id {bad[0]} outside vocabulary of size {c.vocab_size}")
    return T.take_rows(model.params["embed"], tokens)


def forward(
    model: Model,
    tokens: Sequence[int],
    mode: str = "eval",
    noise: NoiseConfig | None = None,
    rng: np.random.Generator | None = None,
    noise_rng: np.random.Generator | None = None,
) -> Tensor:
    """Logits of shape (len(tokens), vocab_size).

    ``rng`` drives adapter dropout and ``noise_rng`` the embedding noise; both
    matter only in train mode.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    c = model.config
    x = embed_tokens(model, tokens)
    if noise is not None:
        x = inject_noise(x, noise, mode, rng=noise_rng)
    positions = np.arange(x.shape[0])
    for i in range(c.n_layers):
        p = f"layers.{i}."
        h = rmsnorm(x, model.params[p + "attn_norm"], c.rmsnorm_eps)
        x = x + _attention_block(model, p, h, positions, mode, rng)
        h = rmsnorm(x, model.params[p + "ffn_norm"], c.rmsnorm_eps)
        x = x + _swiglu_projected(model, p, h, mode, rng)
    x = rmsnorm(x, model.params["final_norm"], c.rmsnorm_eps)
    return x @ model.params["head"]

