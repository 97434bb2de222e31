#!/usr/bin/env python3
"""Reproduce the five ablation table row structures at desk scale: SE stage
placement, reduction factor, integration strategy, hidden-layer count, and
squeeze pooling variant. Every sweep shares the seed, corpus, minibatch
order, and backbone initialization, so rows differ only in the SE axis.

Each sweep writes <out>/<axis>/ablation/results.tsv.

Usage: python scripts/run_ablation_tables.py [--out runs/tables] [--seed 2024]
       [--axes stages,reduction,integration,hidden,pooling]
"""

import argparse
import os
import sys

from sevx.cli import main as sevx_main

BASE_CONFIG = """\
seed = {seed}
out = {out}
model.scale_factor = 0.125
model.segment_frames = 64
data.num_speakers = 20
data.utts_per_speaker = 8
data.frames_per_utt = 64
data.chunk_frames = 64
data.noise_level = 0.25
optim.batch_size = 20
optim.epochs = 8
optim.lr = 0.15
se.stages = 1,2
se.reduction = 4
se.hidden_layers = 2
se.pooling = mean_std
"""

SWEEPS = {
    "stages": "stages=|1|1,2|1,2,3|1,2,3,4",
    "reduction": "r=2|4|8",
    "integration": "integration=standard|pre|post|identity",
    "hidden": "h=1|2|3|4",
    "pooling": "pooling=max|mean|std|mean_std",
}


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/tables")
    parser.add_argument("--seed", type=int, default=2024)
    parser.add_argument("--axes", default=",".join(SWEEPS),
                        help="comma list of sweeps to run")
    args = parser.parse_args()

    axes = [a.strip() for a in args.axes.split(",") if a.strip()]
    unknown = [a for a in axes if a not in SWEEPS]
    if unknown:
        print(f"unknown axes: {unknown}; available: {sorted(SWEEPS)}", file=sys.stderr)
        return 1

    for axis in axes:
        out = os.path.join(args.out, axis)
        os.makedirs(out, exist_ok=True)
        cfg_path = os.path.join(out, "base.cfg")
        with open(cfg_path, "w") as f:
            f.write(BASE_CONFIG.format(seed=args.seed, out=out))
        rc = sevx_main(["--sequential", "make-data", "--config", cfg_path])
        if rc != 0:
            return rc
        rc = sevx_main(["--sequential", "ablate", "--config", cfg_path,
                        "--grid", SWEEPS[axis]])
        if rc != 0:
            return rc
        print(f"== {axis} sweep -> {os.path.join(out, 'ablation', 'results.tsv')}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
