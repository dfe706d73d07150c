"""Render a sweep plot_data.csv as an ASCII chart.

    python scripts/plot_sweep.py runs/sweep/plot_data.csv
"""

import csv
import sys
from collections import defaultdict


def main():
    path = sys.argv[1]
    series = defaultdict(list)
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            series[row["variant"]].append(
                (float(row["range_seconds"]), float(row["mean_uar"]), float(row["std_uar"]))
            )
    width = 50
    lo = min(m - s for pts in series.values() for _, m, s in pts)
    hi = max(m + s for pts in series.values() for _, m, s in pts)
    lo, hi = min(lo, 0.45), max(hi, 0.55)
    span = hi - lo
    for variant, pts in series.items():
        means = [m for _, m, _ in pts]
        print(f"\n{variant}  (spread {max(means) - min(means):.4f})")
        for sec, mean, std in sorted(pts):
            pos = int((mean - lo) / span * width)
            bar = " " * pos + "o"
            print(f"  {sec:5.1f}s {mean:.4f} +/-{std:.4f} |{bar:<{width + 1}}|")
    print(f"\n  scale: {lo:.3f} .. {hi:.3f} UAR")


if __name__ == "__main__":
    main()
