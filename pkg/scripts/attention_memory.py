"""Peak score-buffer size of the naive and streaming kernels across sequence lengths."""
import argparse

from peftlab.attention import peak_score_storage


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--block", type=int, default=32)
    ap.add_argument("--head-dim", type=int, default=16)
    ap.add_argument("--lengths", default="32,64,128,360,512")
    args = ap.parse_args()
    print(f"{'seq':>6}{'naive':>10}{'streaming':>11}{'ratio':>8}")
    for n in (int(x) for x in args.lengths.split(",")):
        a = peak_score_storage(n, n, args.head_dim, args.block, "naive")
        b = peak_score_storage(n, n, args.head_dim, args.block, "streaming")
        print(f"{n:>6}{a:>10,}{b:>11,}{b / a:>8.1%}")


if __name__ == "__main__":
    main()
