#!/usr/bin/env python3
"""Noise x OD-deletion grid, averaged over seeds.

Writes the per-run table through the CLI and prints a seed-mean summary::

    python3 scripts/run_sensitivity.py --network fig8 --seeds 0,1,2 --out runs/sens
"""
import argparse
import csv
from collections import defaultdict
from pathlib import Path
from statistics import mean

from urtcg import cli


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--network", default="fig8")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--noise", default="0,0.1,0.2")
    ap.add_argument("--delete-od", default="0,0.2,0.5")
    ap.add_argument("--impute", default="od-interval")
    ap.add_argument("--out", default="runs/sensitivity")
    args = ap.parse_args()

    rc = cli.main(["sensitivity", "--network", args.network, "--seeds", args.seeds, "--noise", args.noise,
                   "--delete-od", args.delete_od, "--impute", args.impute, "--out", args.out])
    if rc:
        return rc
    cells = defaultdict(list)
    with open(Path(args.out) / "sensitivity.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            cells[(float(row["noise"]), float(row["deletion"]))].append(row)
    print(f"{'noise':>5} {'delete':>6} {'R2(link)':>8} {'R2(wait)':>8} {'R2(path)':>8}")
    for (n, d), rows in sorted(cells.items()):
        r = {k: mean(float(x[k]) for x in rows) for k in ("r2_link", "r2_wait", "r2_path")}
        print(f"{n:5.2f} {d:6.2f} {r['r2_link']:8.4f} {r['r2_wait']:8.4f} {r['r2_path']:8.4f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
