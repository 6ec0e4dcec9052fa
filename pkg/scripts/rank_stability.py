"""Per-block feature rank across batches of seeded images, one table per encoder."""

import argparse

import numpy as np

from visprune.config import load_config
from visprune.diagnostics import rank_stability
from visprune.encoder import build_encoder


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="configs/default.toml")
    ap.add_argument("--batches", type=int, default=10)
    ap.add_argument("--batch-size", type=int, default=8)
    ap.add_argument("--first-seed", type=int, default=2000)
    args = ap.parse_args()

    cfg = load_config(args.config)
    size = args.batch_size
    batches = [range(args.first_seed + size * b, args.first_seed + size * (b + 1)) for b in range(args.batches)]
    for spec in cfg.encoder_specs():
        r = rank_stability(build_encoder(spec, cfg.seed), batches, cfg.rel_tol)
        cap = "none" if spec.synthetic_rank is None else spec.synthetic_rank
        print(f"{spec.encoder_id} (synthetic_rank={cap})")
        print("  block  mean-rank  max-batch-std  range-of-means")
        for b in range(spec.num_blocks):
            mean = float(np.mean(r.batch_means[:, b]))
            print(f"  {b:5d}  {mean:9.2f}  {r.batch_stds[:, b].max():13.3f}  {r.mean_range[b]:14.3f}")


if __name__ == "__main__":
    main()
