#!/usr/bin/env python3
"""Stream ablation on the occlusion-heavy benchmark.

Trains all four variants over a paired seed set and reports mean/std mAP
and rank-1 per variant (the directional comparison the acceptance suite
checks). Equivalent to the `topdropnet ablation` command.
"""

import argparse
import os
import sys
import time

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

import numpy as np

from topdropnet import evaluation, network, synthdata, trainer


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", default="runs/ablation")
    parser.add_argument("--seeds", default="1,2,3,4,5")
    parser.add_argument("--epochs", type=int, default=40)
    parser.add_argument("--occlusion", type=float, default=0.5)
    args = parser.parse_args()
    seeds = [int(s) for s in args.seeds.split(",")]

    data_dir = os.path.join(args.out, "data")
    if not os.path.exists(os.path.join(data_dir, "manifest.csv")):
        synthdata.generate_dataset(data_dir, occlusion_prob=args.occlusion, seed=1)
    dataset = synthdata.load_dataset(data_dir)

    start = time.time()
    table = {}
    for variant in network.VARIANTS:
        maps, r1s = [], []
        for seed in seeds:
            cfg = trainer.TrainConfig(total_epochs=args.epochs, seed=seed, variant=variant)
            result = trainer.fit(cfg, dataset)
            query = evaluation.embed_split(result.model, dataset, "query")
            gallery = evaluation.embed_split(result.model, dataset, "gallery")
            raw, _ = evaluation.evaluate_run(query, gallery)
            maps.append(raw.mAP)
            r1s.append(float(raw.cmc[0]))
            print(f"{variant:13s} seed {seed}: mAP {raw.mAP:.4f}  rank-1 {raw.cmc[0]:.4f}")
        table[variant] = (maps, r1s)

    print(f"\n=== {len(seeds)}-seed summary ({time.time() - start:.0f}s) ===")
    print(f"{'variant':14s} {'mAP':>16s} {'rank-1':>16s}")
    for variant, (maps, r1s) in table.items():
        print(
            f"{variant:14s} {np.mean(maps):.4f} +- {np.std(maps):.4f} "
            f"{np.mean(r1s):.4f} +- {np.std(r1s):.4f}"
        )


if __name__ == "__main__":
    main()
