#!/usr/bin/env python3
"""Bound verification on the shared-feature construction, where the
divergence constants are exact. Runs the full inequality suite at v=0 and
v=30 and prints the per-epoch drift bounds; exit code 5 signals a
violated inequality."""

import argparse
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from hflsim import cli

CONFIG = """
[dataset]
classes = 4
dim = 8

[partition]
regime = edge_noniid
classes_per_unit = 1
vehicles = 32
seed = 2
shared_input = true
shared_samples_per_shard = 40

[mobility]
edges = 4
speed = {speed}

[hfl]
eta = {eta}
tau_l = 6
tau_e = 10
cloud_epochs = {epochs}
seed = 13
full_batch = true
record_virtual = true

[model]
family = quadratic
l2_reg = 0.05

[output]
directory = {out}
"""


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="out/bound_check")
    ap.add_argument("--eta", type=float, default=0.05)
    ap.add_argument("--epochs", type=int, default=10)
    args = ap.parse_args()
    worst = 0
    for speed in (0.0, 30.0):
        out = os.path.join(args.out, f"v{speed:g}")
        os.makedirs(out, exist_ok=True)
        cfg_path = os.path.join(out, "experiment.cfg")
        with open(cfg_path, "w") as f:
            f.write(CONFIG.format(speed=speed, eta=args.eta,
                                  epochs=args.epochs, out=out))
        print(f"--- speed {speed:g} m/s ---")
        rc = cli.main(["verify-bounds", "--config", cfg_path])
        worst = max(worst, rc)
    return worst


if __name__ == "__main__":
    sys.exit(main())
