"""Adaptive retained count as the visual attention mass of a snapshot grows."""

import argparse

import numpy as np

from visprune.stage3 import ADAPTIVE, decide, synthetic_snapshot


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--lam", type=float, default=300.0)
    ap.add_argument("--visual", type=int, default=576)
    ap.add_argument("--text", type=int, default=64)
    ap.add_argument("--heads", type=int, default=8)
    ap.add_argument("--k-heads", type=int, default=4)
    ap.add_argument("--seeds", type=int, default=20)
    args = ap.parse_args()

    print("  mass  mean-K   min-K   max-K")
    for mu in np.round(np.arange(0.1, 1.0, 0.1), 1):
        ks = [
            decide(synthetic_snapshot(args.visual, args.text, args.heads, mu, s), args.k_heads, ADAPTIVE, lam=args.lam).retained_count
            for s in range(args.seeds)
        ]
        print(f"  {mu:4.1f}  {np.mean(ks):6.1f}  {min(ks):6d}  {max(ks):6d}")


if __name__ == "__main__":
    main()
