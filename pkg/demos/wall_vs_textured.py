"""Along-track error of the semantic filter on a textured street vs a monotonous wall.

    python3 demos/wall_vs_textured.py [--seed 0] [--length 400]
"""
import argparse

import numpy as np

from semloc.evaluation import along_track_errors, run_semantic
from semloc.semantic_filter import SemanticFilterConfig
from semloc.sim.dataset import build_scenario
from semloc.sim.world import WorldConfig


def along_track(kind, seed, length):
    sc = build_scenario(WorldConfig(route="straight", route_length=length, kind=kind, seed=seed))
    seq = sc.sequence(1)
    rows = run_semantic(sc.semantic_map, sc.world.cameras, seq.drive.poses[0], seq.odometry,
                        lambda k: seq.frame(k + 1).images, SemanticFilterConfig(), np.random.default_rng(seed))
    return along_track_errors(np.array(rows)[:, 1:3], seq.drive.poses[1:])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--length", type=float, default=400.0)
    args = ap.parse_args()
    errs = {kind: along_track(kind, args.seed, args.length) for kind in ("textured", "wall")}
    print(f"{'step':>6} {'textured':>10} {'wall':>10}")
    n = min(len(e) for e in errs.values())
    for k in range(0, n, max(1, n // 15)):
        print(f"{k:6d} {errs['textured'][k]:10.2f} {errs['wall'][k]:10.2f}")
    mean = {kind: np.abs(e[50:]).mean() for kind, e in errs.items()}
    print(f"mean |along-track| after 50 steps: textured {mean['textured']:.2f} m, wall {mean['wall']:.2f} m "
          f"(x{mean['wall'] / mean['textured']:.1f})")


if __name__ == "__main__":
    main()
