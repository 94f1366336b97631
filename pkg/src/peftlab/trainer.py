"""Supervised instruction fine-tuning: Adam, gradient accumulation, adapter-only updates."""
from __future__ import annotations

import hashlib
import math
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import InstructionExample, RawRecord, TaskSpec, encode_example, parse_flat_config
from .lora import AdapterConfig, attach_adapters, count_trainable
from .model import Model, forward
from .neftune import NoiseConfig
from .tensor import Tensor, cross_entropy


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    micro_batch: int = 3
    grad_accum: int = 4
    learning_rate: float = 5e-5
    epochs: int = 3
    max_tokens: int = 360
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    neftune_alpha: float = 0.3
    use_streaming_attention: bool = True
    block_size: int = 32
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    max_grad_norm: float | None = None
    full_sequence_loss: bool = False
    no_think: bool = True

    def __post_init__(self):
        if self.micro_batch < 1 or self.grad_accum < 1:
            raise ValueError("micro_batch and grad_accum must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.neftune_alpha < 0:
            raise ValueError("neftune_alpha must be >= 0")

    @property
    def effective_batch(self) -> int:
        return self.micro_batch * self.grad_accum


# flat config key -> TrainConfig field
_FLAT_KEYS = {
    "batch_size": "micro_batch",
    "grad_accum": "grad_accum",
    "learning_rate": "learning_rate",
    "epochs": "epochs",
    "max_tokens": "max_tokens",
    "neftune_alpha": "neftune_alpha",
    "streaming_attention": "use_streaming_attention",
    "block_size": "block_size",
    "seed": "seed",
    "adam_beta1": "adam_beta1",
    "adam_beta2": "adam_beta2",
    "adam_eps": "adam_eps",
    "max_grad_norm": "max_grad_norm",
    "full_sequence_loss": "full_sequence_loss",
    "no_think": "no_think",
}
_ADAPTER_KEYS = {
    "lora_rank": "rank",
    "lora_alpha": "alpha",
    "lora_dropout": "dropout_p",
    "lora_scheme": "scheme",
    "lora_targets": "targets",
}


def train_config_from_mapping(values: dict) -> TrainConfig:
    unknown = set(values) - set(_FLAT_KEYS) - set(_ADAPTER_KEYS)
    if unknown:
        raise ValueError(f"unknown training config keys: {sorted(unknown)}")
    kwargs = {_FLAT_KEYS[k]: v for k, v in values.items() if k in _FLAT_KEYS}
    adapter_kwargs = {_ADAPTER_KEYS[k]: v for k, v in values.items() if k in _ADAPTER_KEYS}
    if isinstance(adapter_kwargs.get("targets"), str):
        adapter_kwargs["targets"] = tuple(t.strip() for t in adapter_kwargs["targets"].split(","))
    return TrainConfig(adapter=AdapterConfig(**adapter_kwargs), **kwargs)


def load_train_config(path) -> tuple[TrainConfig, dict]:
    """Read a flat ``key = value`` file; returns the config and any ``[model]`` section.

    ``PEFT_SEED`` in the environment overrides the file's seed.
    """
    sections = parse_flat_config(Path(path).read_text(encoding="utf-8"))
    cfg = train_config_from_mapping(sections.get("", {}))
    if os.environ.get("PEFT_SEED"):
        cfg = replace(cfg, seed=int(os.environ["PEFT_SEED"]))
    return cfg, sections.get("model", {})


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """Bias-corrected Adam, applied in place to ``params``."""
    if lr <= 0:
        raise ValueError(f"learning rate must be > 0, got {lr}")
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name, np.zeros(p.shape))
        v = state.v.get(name, np.zeros(p.shape))
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
        state.m[name], state.v[name] = m, v
    return state


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(key)))


def example_loss(
    model: Model,
    ex: InstructionExample,
    mode: str = "train",
    noise: NoiseConfig | None = None,
    rng=None,
    noise_rng=None,
    full_sequence: bool = False,
) -> Tensor:
    """Next-token loss on one example; by default only assistant-turn targets count."""
    ids = list(ex.ids)
    logits = forward(model, ids[:-1], mode=mode, noise=noise, rng=rng, noise_rng=noise_rng)
    mask = [True] * (len(ids) - 1) if full_sequence else list(ex.mask[1:])
    return cross_entropy(logits, ids[1:], mask)


def _clip(grads: dict[str, np.ndarray], max_norm: float) -> None:
    total = math.sqrt(float(np.sum([np.sum(g * g) for g in grads.values()])))
    if total > max_norm:
        for k in grads:
            grads[k] = grads[k] * (max_norm / total)


def accumulate_and_step(
    model: Model,
    micro_batches: Sequence[Sequence[InstructionExample]],
    config: TrainConfig,
    state: AdamState,
    step_key: int = 0,
) -> float:
    """One optimizer step over ``micro_batches``; returns the mean micro-batch loss.

    Each micro-batch loss is the mean of its per-example losses and is scaled
    by ``1 / len(micro_batches)`` before backward.
    """
    if not micro_batches or any(len(mb) == 0 for mb in micro_batches):
        raise ValueError("accumulate_and_step needs non-empty micro-batches")
    k = len(micro_batches)
    noise = NoiseConfig(config.neftune_alpha, config.seed) if config.neftune_alpha > 0 else None
    params = model.trainable_parameters()
    if not params:
        raise TrainingError("model has no trainable parameters")
    model.zero_grad()
    losses = []
    for mi, mb in enumerate(micro_batches):
        per_example = []
        for ei, ex in enumerate(mb):
            per_example.append(
                example_loss(
                    model, ex, mode="train", noise=noise,
                    rng=_rng(config.seed, 1, step_key, mi, ei),
                    noise_rng=_rng(config.seed, 2, step_key, mi, ei),
                    full_sequence=config.full_sequence_loss,
                )
            )
        mb_loss = per_example[0]
        for extra in per_example[1:]:
            mb_loss = mb_loss + extra
        mb_loss = mb_loss * (1.0 / len(mb))
        value = mb_loss.item()
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss in micro-batch {mi}")
        losses.append(value)
        (mb_loss * (1.0 / k)).backward()
    grads = {name: p.grad for name, p in params.items() if p.grad is not None}
    if config.max_grad_norm is not None:
        _clip(grads, config.max_grad_norm)
    adam_step(params, grads, state, config.learning_rate,
              config.adam_beta1, config.adam_beta2, config.adam_eps)
    return float(np.mean(losses))


@dataclass
class TrainReport:
    step_losses: list[float]
    epoch_means: list[float]
    epoch_seconds: list[float]
    trainable_params: int
    steps_per_epoch: int

    @property
    def epoch_boundaries(self) -> list[int]:
        return [self.steps_per_epoch * (e + 1) for e in range(len(self.epoch_means))]


def steps_per_epoch(n_examples: int, config: TrainConfig) -> int:
    return math.ceil(n_examples / config.effective_batch)


def encode_all(records: Sequence[RawRecord], task: TaskSpec, config: TrainConfig) -> list[InstructionExample]:
    return [encode_example(r, task, config.max_tokens, config.no_think) for r in records]


def train(
    model: Model,
    records: Sequence[RawRecord],
    task: TaskSpec,
    config: TrainConfig,
    log=None,
) -> tuple[TrainReport, Model]:
    """Fine-tune adapters on ``records`` for ``config.epochs`` epochs.

    Adapters are attached first when the model has none. ``log`` is an
    optional callable receiving one progress string per epoch.
    """
    if not records:
        raise ValueError("training dataset is empty")
    examples = encode_all(records, task, config)
    if not model.adapters:
        attach_adapters(model, config.adapter, seed=config.seed)
    model.attention_kernel = "streaming" if config.use_streaming_attention else "naive"
    model.block_size = config.block_size
    state = AdamState()
    per_epoch = steps_per_epoch(len(examples), config)
    window = config.effective_batch
    step_losses: list[float] = []
    epoch_means: list[float] = []
    epoch_seconds: list[float] = []
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = _rng(config.seed, 0, epoch).permutation(len(examples))
        epoch_losses = []
        for s in range(per_epoch):
            ids = order[s * window:(s + 1) * window]
            micro = [
                [examples[i] for i in ids[j:j + config.micro_batch]]
                for j in range(0, len(ids), config.micro_batch)
            ]
            step = len(step_losses)
            try:
                loss = accumulate_and_step(model, micro, config, state, step_key=step)
            except TrainingError as exc:
                raise TrainingError(f"step {step}: {exc}; batch example ids {ids.tolist()}") from exc
            step_losses.append(loss)
            epoch_losses.append(loss)
        epoch_seconds.append(time.perf_counter() - t0)
        epoch_means.append(float(np.mean(epoch_losses)))
        if log is not None:
            log(f"epoch {epoch + 1}/{config.epochs} mean loss {epoch_means[-1]:.4f}")
    report = TrainReport(step_losses, epoch_means, epoch_seconds, count_trainable(model), per_epoch)
    return report, model


def parameter_fingerprint(params: dict[str, Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()
