"""Count MovieLens windows where a PGP policy's CHR matches or beats MLE-Rand.

    python3 scripts/check_movielens_chr.py OUT/chr.csv [--policy pgp-vb] [--capacity 0.3] [--need 9]

Reads the ``chr.csv`` written by ``pgpcache chr --data <ingest dir>`` (one
replication per window) and exits 0 when at least ``--need`` windows pass.
"""

import argparse
import csv
import sys


def count_wins(path, policy="pgp-vb", capacity=0.3):
    """``(wins, windows)`` comparing ``policy`` with mle-rand at one capacity."""
    values = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            if abs(float(row["capacity_fraction"]) - capacity) < 1e-9:
                values[(row["policy"], int(row["replication"]))] = float(row["chr"])
    windows = sorted({rep for pol, rep in values if pol == policy})
    wins = sum(values[(policy, w)] >= values[("mle-rand", w)] for w in windows)
    return wins, len(windows)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    parser.add_argument("chr_csv")
    parser.add_argument("--policy", default="pgp-vb")
    parser.add_argument("--capacity", type=float, default=0.3)
    parser.add_argument("--need", type=int, default=9)
    args = parser.parse_args(argv)
    wins, total = count_wins(args.chr_csv, args.policy, args.capacity)
    print(f"{args.policy} >= mle-rand at capacity {args.capacity:g} on {wins} of {total} windows")
    return 0 if wins >= args.need else 1


if __name__ == "__main__":
    sys.exit(main())
