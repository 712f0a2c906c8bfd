"""Plot ABR against 1/delta from a results directory's plot_data.csv.

Needs matplotlib; without it the series are printed as text.
"""

import argparse
import csv
from collections import defaultdict
from pathlib import Path


def load(path):
    series = defaultdict(list)
    with open(path) as fh:
        for row in csv.DictReader(fh):
            series[row["series"]].append((float(row["inv_delta"]), float(row["abr"])))
    return series


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("results", help="directory holding plot_data.csv")
    ap.add_argument("--out", help="image file (default: <results>/abr.png)")
    args = ap.parse_args(argv)

    series = load(Path(args.results) / "plot_data.csv")
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        for name, pts in series.items():
            print(name)
            for x, y in pts:
                print(f"  1/delta {x:10.4g}  abr {y:.4g}")
        return

    fig, ax = plt.subplots(figsize=(6, 4))
    for name, pts in series.items():
        xs, ys = zip(*pts)
        style = "--" if name.startswith("lower_bound") else "-o"
        ax.loglog(xs, ys, style, label=name, markersize=3)
    ax.set_xlabel("1/delta")
    ax.set_ylabel("average Bayes risk")
    ax.legend()
    fig.tight_layout()
    out = args.out or str(Path(args.results) / "abr.png")
    fig.savefig(out, dpi=150)
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
