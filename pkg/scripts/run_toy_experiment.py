#!/usr/bin/env python3
"""Desk-scale end-to-end experiment: synthesize a 20-speaker corpus, train the
scale-1/8 extractor with SE at stages 1-2 (r=4, h=2, mean+std squeeze), score
the synthetic trial list, and run the excitation analysis.

Usage: python scripts/run_toy_experiment.py [--out runs/toy] [--seed 2024]
"""

import argparse
import os
import sys
import tempfile

from sevx.cli import main as sevx_main

TOY_CONFIG = """\
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
optim.epochs = 16
optim.lr = 0.15
se.stages = 1,2
se.reduction = 4
se.hidden_layers = 2
se.pooling = mean_std
"""


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/toy")
    parser.add_argument("--seed", type=int, default=2024)
    parser.add_argument("--analyze-all-stages", action="store_true",
                        help="also train a short all-stages model for the "
                             "stage 1-4 excitation report")
    args = parser.parse_args()

    os.makedirs(args.out, exist_ok=True)
    cfg_path = os.path.join(args.out, "toy.cfg")
    with open(cfg_path, "w") as f:
        f.write(TOY_CONFIG.format(seed=args.seed, out=args.out))

    for step in (["make-data"], ["train"], ["score"], ["metrics"], ["analyze"]):
        rc = sevx_main(["--sequential"] + step + ["--config", cfg_path])
        if rc != 0 and not (step == ["analyze"]):
            return rc

    if args.analyze_all_stages:
        all_out = os.path.join(args.out, "allstages")
        all_cfg = os.path.join(args.out, "toy_allstages.cfg")
        with open(all_cfg, "w") as f:
            f.write(TOY_CONFIG.format(seed=args.seed, out=all_out)
                    .replace("se.stages = 1,2", "se.stages = 1,2,3,4")
                    .replace("optim.epochs = 16", "optim.epochs = 6"))
        for step in (["make-data"], ["train"], ["analyze"]):
            rc = sevx_main(["--sequential"] + step + ["--config", all_cfg])
            if rc != 0:
                return rc
    return 0


if __name__ == "__main__":
    sys.exit(main())
