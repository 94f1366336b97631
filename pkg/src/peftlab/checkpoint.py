"""``PFT1`` checkpoints.

Layout: the 4 magic bytes ``PFT1``, a little-endian uint64 header length, a
UTF-8 JSON header, then raw little-endian float64 blobs. Each manifest entry
gives a blob's name, shape and byte offset from the start of the blob area.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .lora import AdapterConfig, LoraAdapter
from .model import Model, ModelConfig, build_model
from .tensor import Tensor

MAGIC = b"PFT1"
VERSION = 1
_LEN = struct.Struct("<Q")


class CheckpointFormatError(ValueError):
    pass


@dataclass
class Checkpoint:
    version: int
    config: ModelConfig
    blobs: dict[str, np.ndarray]
    adapter_only: bool = False
    adapter_config: AdapterConfig | None = None
    seed: int | None = None


def _adapter_config_from(d: dict | None) -> AdapterConfig | None:
    if d is None:
        return None
    return AdapterConfig(
        rank=d["rank"], alpha=d["alpha"], scheme=d["scheme"],
        dropout_p=d["dropout_p"], targets=tuple(d["targets"]),
    )


def save_checkpoint(model: Model, path, adapters_only: bool = False, seed: int | None = None) -> None:
    """Write ``model`` (or only its adapter factors) atomically to ``path``."""
    if adapters_only and not model.adapters:
        raise ValueError("model has no adapters to save")
    blobs: dict[str, np.ndarray] = {}
    if not adapters_only:
        blobs.update({k: p.data for k, p in model.params.items()})
    for name, ad in model.adapters.items():
        blobs[f"{name}.lora_A"] = ad.A.data
        blobs[f"{name}.lora_B"] = ad.B.data
    adapter_cfg = None
    if model.adapters:
        adapter_cfg = next(iter(model.adapters.values())).config.to_dict()
    manifest, offset = [], 0
    for name, arr in blobs.items():
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = {
        "version": VERSION,
        "config": model.config.to_dict(),
        "adapter_only": adapters_only,
        "adapter_config": adapter_cfg,
        "adapter_names": list(model.adapters),
        "seed": seed,
        "blobs": manifest,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent if str(path.parent) else ".", prefix=".pft-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(_LEN.pack(len(hbytes)))
            fh.write(hbytes)
            for arr in blobs.values():
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic bytes (expected {MAGIC!r})")
    if len(raw) < 4 + _LEN.size:
        raise CheckpointFormatError(f"{path}: truncated before header length")
    (hlen,) = _LEN.unpack_from(raw, 4)
    start = 4 + _LEN.size
    if len(raw) < start + hlen:
        raise CheckpointFormatError(f"{path}: truncated inside header ({len(raw) - start} of {hlen} bytes)")
    try:
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: header is not valid JSON") from exc
    if header.get("version") != VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {header.get('version')!r}")
    data = memoryview(raw)[start + hlen:]
    blobs = {}
    expected = 0
    for entry in header["blobs"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        off = entry["offset"]
        end = off + count * 8
        if off != expected or end > len(data):
            raise CheckpointFormatError(
                f"{path}: blob {entry['name']!r} (bytes {off}..{end}) runs past the {len(data)}-byte data section"
            )
        blobs[entry["name"]] = np.frombuffer(data[off:end], dtype="<f8").astype(np.float64).reshape(shape)
        expected = end
    if expected != len(data):
        raise CheckpointFormatError(f"{path}: {len(data) - expected} trailing bytes after last blob")
    return Checkpoint(
        version=header["version"],
        config=ModelConfig.from_dict(header["config"]),
        blobs=blobs,
        adapter_only=bool(header["adapter_only"]),
        adapter_config=_adapter_config_from(header.get("adapter_config")),
        seed=header.get("seed"),
    )


def _adapter_names(ckpt: Checkpoint) -> list[str]:
    return [k[: -len(".lora_A")] for k in ckpt.blobs if k.endswith(".lora_A")]


def apply_adapters(model: Model, ckpt: Checkpoint) -> Model:
    """Attach the checkpoint's adapter factors onto ``model`` (which must match its shape)."""
    if ckpt.adapter_config is None:
        raise CheckpointFormatError("checkpoint holds no adapters")
    if ckpt.config != model.config:
        raise CheckpointFormatError("checkpoint model config does not match the base model")
    for p in model.params.values():
        p.requires_grad = False
    model.adapters = {}
    for name in _adapter_names(ckpt):
        model.adapters[name] = LoraAdapter(
            A=Tensor(ckpt.blobs[f"{name}.lora_A"], requires_grad=True),
            B=Tensor(ckpt.blobs[f"{name}.lora_B"], requires_grad=True),
            base=model.params[name],
            config=ckpt.adapter_config,
        )
    return model


def model_from_checkpoint(ckpt: Checkpoint, base: Model | None = None) -> Model:
    """Rebuild a model; adapter-only checkpoints need the matching ``base``."""
    if ckpt.adapter_only:
        if base is None:
            raise CheckpointFormatError("adapter-only checkpoint needs a base model")
        return apply_adapters(base, ckpt)
    model = build_model(ckpt.config, seed=0)
    for name in model.params:
        if name not in ckpt.blobs:
            raise CheckpointFormatError(f"checkpoint is missing parameter {name!r}")
        if ckpt.blobs[name].shape != model.params[name].shape:
            raise CheckpointFormatError(f"parameter {name!r} has shape {ckpt.blobs[name].shape}")
        model.params[name] = Tensor(ckpt.blobs[name], requires_grad=True)
    if _adapter_names(ckpt):
        apply_adapters(model, ckpt)
    return model
