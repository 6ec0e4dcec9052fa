"""Nuclear norm kept by cooperative, random and separate fusion pruning on the overlap family."""

import argparse

import numpy as np

from visprune.stage2 import diversity_comparison, overlap_instance


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--instances", type=int, default=200)
    ap.add_argument("--k", type=int, default=12)
    ap.add_argument("--noise", type=float, default=0.05)
    args = ap.parse_args()

    rows = [
        diversity_comparison(overlap_instance(s, noise=args.noise), args.k, s) for s in range(args.instances)
    ]
    nuc = {m: np.array([r[m]["nuclear_norm"] for r in rows]) for m in ("unpruned", "cooperative", "random", "separate")}
    for m, v in nuc.items():
        print(f"{m:<12} mean nuclear norm {v.mean():9.3f}")
    for other in ("random", "separate"):
        wins = float(np.mean(nuc["cooperative"] >= nuc[other]))
        print(f"cooperative >= {other:<9} in {wins:6.1%} of {args.instances} instances")


if __name__ == "__main__":
    main()
