"""Train every named experiment variant and compare held-out metrics and search overhead."""

import argparse
import json

import numpy as np

from daer.trainer import EXPERIMENTS, TrainConfig, Trainer, experiment_config, planted_mass_ratio


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--experiments", default=",".join(EXPERIMENTS))
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--p1", type=int, default=250)
    p.add_argument("--p2", type=int, default=250)
    args = p.parse_args()
    base = TrainConfig(total_steps_p1=args.p1, total_steps_p2=args.p2, warmup_steps=max(1, args.p1 // 10))
    for name in args.experiments.split(","):
        ratios, r1, share = [], [], []
        for seed in range(args.seeds):
            tr = Trainer(experiment_config(TrainConfig(**{**base.__dict__, "seed": seed}), name), name)
            recs = tr.run()
            ev = tr.evaluate()
            ratios.append(planted_mass_ratio(ev["planted_mass"], tr.spec))
            r1.append(ev["r1"])
            step_ms = sum(r["step_ms"] for r in recs)
            share.append(sum(r["mcts_ms"] for r in recs) / step_ms if step_ms else 0.0)
        print(json.dumps({"experiment": name, "planted_mass_ratio": float(np.mean(ratios)),
                          "r1": float(np.mean(r1)), "mcts_share": float(np.mean(share))}))


if __name__ == "__main__":
    main()
