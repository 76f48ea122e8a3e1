#!/usr/bin/env python3
"""Scaling test: the same homogeneous-fleet run at growing client counts.

Also re-executes the largest fleet with a different worker count and
verifies the round logs come out byte-identical (the determinism contract
the simulator makes under any scheduler).
"""

import argparse
import sys

import numpy as np

from hetfed import harness
from hetfed.config import ExperimentConfig, parse_config


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", action="append", default=["configs/base.json"])
    parser.add_argument("--out", default="runs/scaling")
    parser.add_argument("--clients", type=int, nargs="+", default=[10, 25, 50, 100])
    parser.add_argument("--rounds", type=int, default=5)
    parser.add_argument("--shard-size", type=int, default=60)
    args = parser.parse_args()

    overrides = [
        f"rounds={args.rounds}",
        "local_epochs=2",
        "hyperparams.lr=0.1",
        f"data.shard_size={args.shard_size}",
        "data.per_class=2500",
        "data.n_public=100",
        "data.test_size=500",
        "archs.hidden_layers=[[12]]",
    ]
    for k in args.clients:
        resolved = parse_config(args.config, overrides + [f"data.clients={k}"])
        cfg = ExperimentConfig.from_dict(resolved)
        run_dir = harness.execute_run(cfg, args.out)
        result, _ = harness.run_experiment(cfg)
        final = result.records[-1]
        accs = [s.accuracy for s in final.clients]
        print(f"K={k:<4} mean acc {np.mean(accs):.4f} "
              f"(min {min(accs):.4f}, max {max(accs):.4f}) -> {run_dir}")

    # determinism across worker counts on the largest fleet
    resolved = parse_config(args.config, overrides + [f"data.clients={args.clients[-1]}"])
    cfg = ExperimentConfig.from_dict(resolved)
    a = harness.execute_run(cfg, f"{args.out}/jobs1", jobs=1)
    b = harness.execute_run(cfg, f"{args.out}/jobs4", jobs=4)
    same = (a / harness.ROUNDS_FILE).read_bytes() == (b / harness.ROUNDS_FILE).read_bytes()
    print(f"log bytes identical across jobs settings: {same}")
    return 0 if same else 1


if __name__ == "__main__":
    sys.exit(main())
