"""Mean adapter update norm ||scale * A B||_F versus rank for both scaling rules."""
import argparse

import numpy as np

from peftlab.lora import AdapterConfig, branch_delta, init_adapter


def mean_norm(rank, scheme, alpha, d, seeds):
    norms = []
    for s in range(seeds):
        rng = np.random.default_rng([rank, s])
        ad = init_adapter(d, d, AdapterConfig(rank=rank, alpha=alpha, scheme=scheme), seed=s)
        ad.A.data = rng.normal(size=(d, rank))
        ad.B.data = rng.normal(size=(rank, d))
        norms.append(np.linalg.norm(branch_delta(ad)))
    return float(np.mean(norms))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--d", type=int, default=64)
    ap.add_argument("--seeds", type=int, default=100)
    ap.add_argument("--ranks", default="1,4,8,16,64")
    args = ap.parse_args()
    ranks = [int(r) for r in args.ranks.split(",")]

    for rule, alpha_of in (("alpha=16", lambda r: 16.0), ("alpha=2r", lambda r: 2.0 * r)):
        print(f"\n{rule}")
        print(f"{'rank':>6}{'lora':>12}{'rslora':>12}")
        rows = {s: [mean_norm(r, s, alpha_of(r), args.d, args.seeds) for r in ranks] for s in ("lora", "rslora")}
        for i, r in enumerate(ranks):
            print(f"{r:>6}{rows['lora'][i]:>12.2f}{rows['rslora'][i]:>12.2f}")
        for scheme, vals in rows.items():
            slope = np.polyfit(np.log(ranks), np.log(vals), 1)[0]
            print(f"{scheme:>8} log-log slope {slope:+.3f}")


if __name__ == "__main__":
    main()
