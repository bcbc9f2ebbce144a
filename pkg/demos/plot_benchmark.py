"""Bar chart of sub-threshold fractions from a `semloc run` output directory.

    semloc run --spec configs/benchmark.ini --output bench
    python3 demos/plot_benchmark.py bench           # writes bench/fractions.png

Needs the optional ``demos`` extra (matplotlib).
"""
import csv
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def main(out_dir):
    out_dir = Path(out_dir)
    with open(out_dir / "fractions.csv") as fh:
        rows = list(csv.DictReader(fh))
    cols = [c for c in rows[0] if c.startswith("below_")]
    seqs = list(dict.fromkeys(r["sequence"] for r in rows))
    fig, axes = plt.subplots(len(cols), 1, figsize=(10, 2.5 * len(cols)), sharex=True)
    for ax, col in zip(np.atleast_1d(axes), cols):
        for j, filt in enumerate(("semantic", "sift")):
            vals = {r["sequence"]: float(r[col]) for r in rows if r["filter"] == filt}
            ax.bar(np.arange(len(seqs)) + 0.4 * j - 0.2, [vals.get(s, np.nan) for s in seqs], 0.4, label=filt)
        ax.set_ylabel(col.replace("below_", "< ").replace("m", " m"))
        ax.set_ylim(0, 1.05)
    ax.set_xticks(range(len(seqs)), seqs)
    np.atleast_1d(axes)[0].legend()
    fig.tight_layout()
    fig.savefig(out_dir / "fractions.png", dpi=120)
    print(out_dir / "fractions.png")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "benchmark-out")
