"""Command-line entry point: ``peftlab train|eval|inspect|preset|synth``."""
from __future__ import annotations

import argparse
import json
import sys
import time

from .checkpoint import CheckpointFormatError, load_checkpoint, model_from_checkpoint, save_checkpoint
from .data import VOCAB_SIZE, DatasetError, TruncationError, load_dataset, load_task, write_jsonl
from .evaluate import evaluate, export_loss_curve
from .lora import count_trainable
from .model import ConfigError, build_model, estimate_param_count, qwen3_8b_preset, tiny_config
from .synthetic import make_records
from .trainer import TrainingError, load_train_config, train

_MODEL_KEYS = ("n_layers", "d_model", "n_heads", "n_kv_heads", "head_dim", "d_ff", "max_context",
               "rope_base", "rmsnorm_eps")


def _print_config(cfg) -> None:
    for key, value in cfg.to_dict().items():
        print(f"{key} = {value:,}" if isinstance(value, int) else f"{key} = {value}")


def cmd_preset(args) -> int:
    if args.name != "qwen3-8b":
        raise ValueError(f"unknown preset {args.name!r}; available: qwen3-8b")
    cfg = qwen3_8b_preset()
    print(
        f"layers={cfg.n_layers} hidden={cfg.d_model:,} ffn={cfg.d_ff:,} heads={cfg.n_heads} "
        f"kv_heads={cfg.n_kv_heads} vocab={cfg.vocab_size:,} context={cfg.max_context:,}"
    )
    _print_config(cfg)
    print(f"group_size = {cfg.group_size}")
    print(f"estimated_params = {estimate_param_count(cfg):,}")
    return 0


def cmd_train(args) -> int:
    cfg, model_section = load_train_config(args.config)
    task = load_task(args.task)
    records, hist = load_dataset(args.data, task)
    print("records = " + str(len(records)) + "  " + " ".join(f"{k}:{v}" for k, v in hist.items()))
    if args.base:
        model = model_from_checkpoint(load_checkpoint(args.base))
    else:
        unknown = set(model_section) - set(_MODEL_KEYS)
        if unknown:
            raise ValueError(f"unknown [model] keys: {sorted(unknown)}")
        model = build_model(tiny_config(vocab_size=VOCAB_SIZE, **model_section), seed=cfg.seed)
    t0 = time.perf_counter()
    report, model = train(model, records, task, cfg, log=print)
    for i, s in enumerate(report.epoch_seconds, 1):
        print(f"# epoch {i} seconds {s:.2f}")
    print(f"steps = {len(report.step_losses)}")
    print(f"final_loss = {report.step_losses[-1]:.6f}")
    print(f"trainable_params = {report.trainable_params:,}")
    save_checkpoint(model, args.out, adapters_only=False, seed=cfg.seed)
    if args.adapters_out:
        save_checkpoint(model, args.adapters_out, adapters_only=True, seed=cfg.seed)
    if args.loss_csv:
        export_loss_curve(report, args.loss_csv)
    print(f"# total seconds {time.perf_counter() - t0:.2f}")
    return 0


def cmd_eval(args) -> int:
    task = load_task(args.task)
    records, _ = load_dataset(args.data, task)
    ckpt = load_checkpoint(args.ckpt)
    base = model_from_checkpoint(load_checkpoint(args.base)) if args.base else None
    model = model_from_checkpoint(ckpt, base=base)
    report = evaluate(model, records, task, constrained=args.constrained)
    print(report.to_text())
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, indent=2)
    return 0


def cmd_inspect(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    _print_config(ckpt.config)
    print(f"format_version = {ckpt.version}")
    print(f"adapter_only = {ckpt.adapter_only}")
    print(f"seed = {ckpt.seed}")
    if ckpt.adapter_config is not None:
        ac = ckpt.adapter_config
        print(f"adapter = rank {ac.rank}, alpha {ac.alpha}, scheme {ac.scheme}, "
              f"dropout {ac.dropout_p}, targets {','.join(ac.targets)}")
    stored = sum(int(b.size) for b in ckpt.blobs.values())
    print(f"stored_values = {stored:,}")
    print(f"estimated_params = {estimate_param_count(ckpt.config):,}")
    if not ckpt.adapter_only:
        print(f"trainable_params = {count_trainable(model_from_checkpoint(ckpt)):,}")
    return 0


def cmd_synth(args) -> int:
    write_jsonl(make_records(args.n, seed=args.seed), args.out)
    print(f"wrote {args.n} records to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="peftlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fine-tune adapters on a JSONL dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--task", required=True, help="sentiment3, topic20 or a task file")
    p.add_argument("--out", required=True)
    p.add_argument("--loss-csv")
    p.add_argument("--adapters-out", help="also write an adapter-only checkpoint")
    p.add_argument("--base", help="start from this checkpoint instead of a fresh model")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy of a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--json", help="also write the report as JSON here")
    p.add_argument("--constrained", action="store_true",
                   help="score each label continuation instead of free greedy decoding")
    p.add_argument("--base", help="base checkpoint for an adapter-only --ckpt")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="print a checkpoint's config and counts")
    p.add_argument("--ckpt", required=True)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("preset", help="print a named architecture preset")
    p.add_argument("name")
    p.set_defaults(func=cmd_preset)

    p = sub.add_parser("synth", help="write the synthetic keyword dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=600)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (DatasetError, TruncationError, CheckpointFormatError, ConfigError, TrainingError,
            ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
