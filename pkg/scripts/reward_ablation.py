"""Sweep the reward mix alpha and report held-out planted-mass ratio and retrieval metrics."""

import argparse
import json
import sys

from daer.bench import alpha_ablation
from daer.trainer import TrainConfig


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--alphas", default="0,0.25,0.5,0.75,1")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--p1", type=int, default=300)
    p.add_argument("--p2", type=int, default=300)
    p.add_argument("--warmup", type=int, default=30)
    args = p.parse_args()
    base = TrainConfig(total_steps_p1=args.p1, total_steps_p2=args.p2, warmup_steps=args.warmup)
    alphas = [float(a) for a in args.alphas.split(",")]
    cells = alpha_ablation(base, alphas, range(args.seeds), sink=sys.stdout)
    best = max(cells, key=lambda c: c.planted_mass_ratio)
    print(json.dumps({"best_alpha": best.alpha, "planted_mass_ratio": best.planted_mass_ratio}))


if __name__ == "__main__":
    main()
