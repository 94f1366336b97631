"""Finite-difference check of every trainable tensor in a small adapted decoder."""
import argparse

import numpy as np

from peftlab import tensor as T
from peftlab.gradcheck import check_gradients
from peftlab.lora import AdapterConfig, attach_adapters
from peftlab.model import PROJECTIONS, ModelConfig, build_model, forward


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--rank", type=int, default=4)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--full", action="store_true", help="check base weights instead of adapters")
    args = ap.parse_args()

    cfg = ModelConfig(n_layers=1, d_model=32, n_heads=2, n_kv_heads=1, head_dim=16,
                      d_ff=64, vocab_size=64, max_context=64)
    model = build_model(cfg, seed=args.seed)
    rng = np.random.default_rng(args.seed + 1)
    if not args.full:
        attach_adapters(model, AdapterConfig(rank=args.rank, targets=PROJECTIONS), seed=args.seed)
        for ad in model.adapters.values():
            ad.B.data = rng.normal(0, 0.1, size=ad.B.shape)
    toks = rng.integers(0, 64, size=12).tolist()

    def loss():
        logits = forward(model, toks[:-1], mode="train",
                         rng=np.random.default_rng(7), noise_rng=np.random.default_rng(8))
        return T.cross_entropy(logits, toks[1:])

    errors = check_gradients(loss, model.trainable_parameters())
    for name, err in sorted(errors.items(), key=lambda kv: -kv[1]):
        print(f"{err:10.2e}  {name}")


if __name__ == "__main__":
    main()
