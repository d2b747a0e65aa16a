#!/usr/bin/env python3
"""Run the built-in benchmark gallery and write reports to an output directory.

Equivalent to `fuelgrid bench`, kept as a script for quick editing during
experiments (change seeds, add instances, etc.).
"""
import argparse
import sys

from fuelgrid.cli import run


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="out/bench")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()
    return run("bench", None, args.out, args.seed, args.threads)


if __name__ == "__main__":
    sys.exit(main())
