"""Train on the synthetic keyword task and report loss curve and accuracy.

    python scripts/run_convergence.py --config scripts/configs/default.cfg
    python scripts/run_convergence.py --config scripts/configs/toy.cfg --loss-csv toy_loss.csv
"""
import argparse
import time

from peftlab.data import VOCAB_SIZE, sentiment3, stratified_split
from peftlab.evaluate import evaluate, export_loss_curve
from peftlab.model import build_model, tiny_config
from peftlab.synthetic import make_records
from peftlab.trainer import load_train_config, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", required=True)
    ap.add_argument("--n", type=int, default=600)
    ap.add_argument("--loss-csv")
    ap.add_argument("--constrained", action="store_true")
    args = ap.parse_args()

    cfg, model_section = load_train_config(args.config)
    task = sentiment3()
    tr, va = stratified_split(make_records(args.n, cfg.seed, task), 0.1, seed=cfg.seed)
    model = build_model(tiny_config(vocab_size=VOCAB_SIZE, **model_section), seed=cfg.seed)
    t0 = time.perf_counter()
    report, model = train(model, tr, task, cfg, log=print)
    print(f"trained {len(report.step_losses)} steps in {time.perf_counter() - t0:.1f}s, "
          f"{report.trainable_params:,} trainable parameters")
    if args.loss_csv:
        export_loss_curve(report, args.loss_csv)
    for name, recs in (("train", tr), ("held-out", va)):
        r = evaluate(model, recs, task, constrained=args.constrained)
        print(f"{name:>9} accuracy {r.accuracy:.4f}  no-match {r.no_match}/{r.total}")


if __name__ == "__main__":
    main()
