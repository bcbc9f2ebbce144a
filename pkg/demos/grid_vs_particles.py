"""Particle-filter posterior mode vs a brute-force grid filter on a small corridor world.

Reuses the corridor world of the test suite; run from the repository root:

    python3 demos/grid_vs_particles.py [--seeds 3]
"""
import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "tests"))

from corridor import compare_with_grid  # noqa: E402


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=3)
    args = ap.parse_args()
    for seed in range(args.seeds):
        r = compare_with_grid(seed)
        ok = abs(r.grid_mode - r.pf_mode) <= r.cell + 1e-9
        print(f"seed {seed}: grid mode {r.grid_mode:.2f} m, particle mode {r.pf_mode:.2f} m, "
              f"cell {r.cell:.2f} m, {'match' if ok else 'MISMATCH'} ({r.seconds:.0f} s)")


if __name__ == "__main__":
    main()
