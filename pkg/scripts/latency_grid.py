"""Latency grid over (alpha, gamma, c) with the optimal-gamma table and a curve chart.

    python scripts/latency_grid.py [--out DIR]
"""
import argparse
import sys
from pathlib import Path

from specbranch import cli


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="results/latency")
    args = ap.parse_args()
    out = Path(args.out)
    code = cli.main(["analyze", "--out", str(out)])
    if code:
        return code
    code = cli.main(["plot", str(out / "latency_grid.csv"), "--kind", "latency_curves"])
    for line in (out / "optimal_gamma.csv").read_text().splitlines():
        print(line)
    return code


if __name__ == "__main__":
    sys.exit(main())
