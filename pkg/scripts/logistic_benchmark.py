#!/usr/bin/env python3
"""Run the noisy-logistic-map reproduction end to end.

Trains both score variants (relaxed and projection) with the standard
protocol (2^14-point trajectory, batch 2^13, 500 epochs, 64-128-64 MLP,
7 features, distortion coefficient 1), evaluates each seed against the
grid-1024 quadrature oracle and prints the aggregate table.

    python scripts/logistic_benchmark.py --out runs/logistic --seeds 0..19
"""

import argparse
import sys
from pathlib import Path

from dpnet import cli


def main() -> int:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default="runs/logistic")
    p.add_argument("--seeds", default="0..19")
    p.add_argument("--overwrite", action="store_true")
    args = p.parse_args()
    rc = cli.main(
        ["benchmark", "--out", args.out, "--seeds", args.seeds]
        + (["--overwrite"] if args.overwrite else [])
    )
    if rc == 0:
        print((Path(args.out) / "summary.csv").read_text())
    return rc


if __name__ == "__main__":
    sys.exit(main())
