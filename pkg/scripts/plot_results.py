"""Render the CSV tables written by ``parametrix-spde run`` as PNG figures.

usage: python3 scripts/plot_results.py RESULTS_DIR

Needs matplotlib, which is not a package dependency.
"""
import csv
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _num(v):
    try:
        return float(v)
    except ValueError:
        return v if v else float("nan")


def read(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    cols = {h: [] for h in header}
    for row in body:
        for h, v in zip(header, row):
            cols[h].append(_num(v))
    return cols


def collapse(path, ax):
    c = read(path)
    ax.semilogy(c["scaled_distance"], c["scaled_value"], ".", ms=2)
    if c["envelope"]:
        ax.axhline(c["envelope"][0], color="k", lw=0.8)
    ax.set_xlabel("|x-y|^2 / (t-s)")
    ax.set_title(path.stem, fontsize=7)


def main(root):
    root = Path(root)
    figs = []
    for path in sorted(root.rglob("collapse_*.csv")):
        fig, ax = plt.subplots(figsize=(4, 3))
        collapse(path, ax)
        figs.append((fig, path.with_suffix(".png")))
    for path in root.rglob("series_ratios.csv"):
        c = read(path)
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.semilogy(c["m"], c["norm"], ".")
        ax.set_xlabel("m")
        ax.set_ylabel("weighted sup |K_m|")
        figs.append((fig, path.with_suffix(".png")))
    for path in root.rglob("agreement.csv"):
        c = read(path)
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.errorbar(c["v_skorohod"], c["v_fractional"], xerr=c["combined_se"], fmt="o")
        lo = min(c["v_skorohod"] + c["v_fractional"] or [0])
        hi = max(c["v_skorohod"] + c["v_fractional"] or [1])
        ax.plot([lo, hi], [lo, hi], "k--", lw=0.8)
        ax.set_xlabel("Skorohod sum")
        ax.set_ylabel("fractional form")
        figs.append((fig, path.with_suffix(".png")))
    for path in root.rglob("small_time_decay.csv"):
        c = read(path)
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.plot(c["log_h"], c["log_moment"], "o-")
        ax.set_xlabel("log h")
        ax.set_ylabel("log sup-moment")
        figs.append((fig, path.with_suffix(".png")))
    for fig, out in figs:
        fig.tight_layout()
        fig.savefig(out, dpi=120)
        plt.close(fig)
        print(out)


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "results")
