#!/usr/bin/env python3
"""Speed sweep on the edge-skewed hard task: paired seeds, shared batch
streams, only the vehicle speed varies. Produces sweep.csv,
sweep_summary.csv and a manifest under --out."""

import argparse
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from hflsim import cli

CONFIG = """
[dataset]
classes = 4
dim = 8
samples_per_class = 500
separation = 4.0
clusters_per_class = 2
seed = 1

[partition]
regime = edge_noniid
classes_per_unit = 1
vehicles = 32
seed = 2

[mobility]
edges = 4
side_length = 200.0
intersection_zone = 10.0

[hfl]
eta = 0.1
tau_l = 6
tau_e = 10
cloud_epochs = 30
batch_size = 20
seed = 4

[model]
family = mlp1
l2_reg = 0.0
hidden_width = 16

[output]
directory = {out}
"""


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="out/speed_sweep")
    ap.add_argument("--speeds", default="0,1,2,6,15,30")
    ap.add_argument("--seeds", default="1,2,3")
    ap.add_argument("--parallel", type=int, default=1)
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)
    cfg_path = os.path.join(args.out, "experiment.cfg")
    with open(cfg_path, "w") as f:
        f.write(CONFIG.format(out=args.out))
    return cli.main(["sweep-speed", "--config", cfg_path,
                     "--speeds", args.speeds, "--seeds", args.seeds,
                     "--parallel", str(args.parallel)])


if __name__ == "__main__":
    sys.exit(main())
