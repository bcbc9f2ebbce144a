"""Command line: simulate, map, localize, evaluate, storage, run.

Exit codes: 0 success, 1 bad input or configuration, 2 a filter diverged
(error above 50 m for 100 consecutive steps).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .geometry import Pose
from .mapfile import MapFormatError, load_map, map_to_json, save_map
from .motion import read_odometry_csv, read_trajectory_csv, write_odometry_csv, write_trajectory_csv
from .semantic_filter import SemanticFilterConfig
from .seqio import (SequenceFormatError, group_by_time, read_feature_sequence, read_label_sequence,
                    read_pgm_sequence, write_feature_sequence, write_label_sequence, write_pgm_sequence)
from .sim.dataset import build_maps, make_sequence, world_from_config
from .sim.render import default_conditions
from .sim.world import Drive, World, WorldConfig, make_cameras

EXIT_OK, EXIT_SPEC, EXIT_DIVERGED = 0, 1, 2

log = logging.getLogger("semloc")


class SpecError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_SPEC, f"{self.prog}: error: {message}\n")


def _world_config(path) -> WorldConfig:
    if path is None:
        return WorldConfig()
    return WorldConfig.from_ini(Path(path).read_text())


def _condition_dir(data: Path, index: int) -> Path:
    hits = sorted(data.glob(f"{index:02d}_*"))
    if not hits:
        raise SpecError(f"no condition {index} under {data}")
    return hits[0]


def save_world(world: World, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for name, arr in world.to_arrays().items():
        np.save(directory / f"{name}.npy", arr, allow_pickle=False)


def load_world(directory: Path) -> World:
    arrs = {p.stem: np.load(p, allow_pickle=False) for p in sorted(directory.glob("*.npy"))}
    if "positions" not in arrs:
        raise SpecError(f"{directory} holds no world arrays")
    return World.from_arrays(arrs)


# verbs -------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = _world_config(args.world)
    seed = cfg.seed if args.seed is None else args.seed
    conds = default_conditions()
    if args.conditions != "all":
        wanted = [c.strip() for c in args.conditions.split(",")]
        by_name = {c.name: i for i, c in enumerate(conds)}
        missing = [w for w in wanted if w not in by_name]
        if missing:
            raise SpecError(f"unknown conditions {missing}")
        indices = sorted({0, *(by_name[w] for w in wanted)})
    else:
        indices = list(range(len(conds)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    world = world_from_config(cfg, seed)
    (out / "world.ini").write_text(cfg.to_ini())
    save_world(world, out / "world")
    for i in indices:
        seq = make_sequence(world, conds[i], i, seed, n_steps=args.steps or None)
        d = out / f"{i:02d}_{conds[i].name}"
        d.mkdir(exist_ok=True)
        write_trajectory_csv(d / "trajectory.csv", seq.drive.times, seq.drive.poses)
        write_odometry_csv(d / "odometry.csv", seq.drive.times[1:], seq.odometry)
        images, feats = [], []
        first = 0 if i == 0 else 1      # the mapping pass also observes the start pose
        for k in range(first, len(seq.drive.poses)):
            fr = seq.frame(k, with_tracks=(i == 0))
            images.extend(fr.images)
            feats.extend(fr.features)
        if args.labels == "pgm":
            write_pgm_sequence(d / "labels", images)
        else:
            write_label_sequence(d / "labels.slbl", images)
        write_feature_sequence(d / "features.sfea", feats)
        log.info("wrote %s (%d steps)", d, len(seq))
    return EXIT_OK


def _read_labels(path: Path, times=None):
    return read_pgm_sequence(path, times) if path.is_dir() else read_label_sequence(path)


def cmd_map(args) -> int:
    data = Path(args.data)
    world = load_world(data / "world")
    seed = world.config.seed if args.seed is None else args.seed
    d = _condition_dir(data, 0)
    times, poses = read_trajectory_csv(d / "trajectory.csv")
    drive = Drive(times, poses)
    lab_path = d / "labels.slbl" if (d / "labels.slbl").exists() else d / "labels"
    labels = group_by_time(_read_labels(lab_path, times))
    feats = group_by_time(read_feature_sequence(d / "features.sfea"))
    if len(labels) != len(poses) or len(feats) != len(poses):
        raise SpecError("mapping sequence must hold one frame per trajectory pose")
    sem, den = build_maps(world, drive, labels, feats, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_map(sem, out / "semantic.smap")
    save_map(den, out / "dense.smap")
    (out / "semantic.json").write_text(map_to_json(sem))
    log.info("map: %d points", len(sem))
    return EXIT_OK


def _initial_pose(spec: str) -> Pose:
    p = Path(spec)
    if p.exists():
        _, poses = read_trajectory_csv(p)
        return poses[0]
    vals = [float(x) for x in spec.split(",")]
    if len(vals) != 6:
        raise SpecError("--init needs a trajectory CSV or e,n,u,yaw,pitch,roll")
    return Pose.from_state(*vals)


def _frames_by_time(items, times):
    groups = {}
    for it in items:
        groups.setdefault(float(it.t), []).append(it)
    return [groups.get(float(t), []) for t in times]


def cmd_localize(args) -> int:
    smap = load_map(args.map)
    cameras = make_cameras(_world_config(args.world))
    times, odometry = read_odometry_csv(args.odometry)
    init = _initial_pose(args.init)
    rng = np.random.default_rng(args.seed)
    if smap.is_dense:
        if args.features is None:
            raise SpecError("a dense-descriptor map needs --features")
        frames = _frames_by_time(read_feature_sequence(args.features), times)
        rows = ev.run_sift(smap, cameras, init, odometry, frames, rng=rng, times=times)
    else:
        if args.labels is None:
            raise SpecError("a semantic map needs --labels")
        lab = Path(args.labels)
        if lab.is_dir():
            # PGM frames are numbered per camera from the first localization step
            images = read_pgm_sequence(lab, times)
        else:
            images = read_label_sequence(lab)
        frames = _frames_by_time(images, times)
        cfg = SemanticFilterConfig(num_particles=args.particles)
        rows = ev.run_semantic(smap, cameras, init, odometry, frames, cfg, rng, times=times)
    ev.write_pose_csv(args.out, rows)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    rows = ev.read_pose_csv(args.poses)
    times, poses = read_trajectory_csv(args.truth)
    idx = np.searchsorted(times, rows[:, 0])
    idx = np.clip(idx, 0, len(times) - 1)
    if rows.size == 0 or np.any(np.abs(times[idx] - rows[:, 0]) > 1e-9):
        raise SpecError("pose timestamps do not match the trajectory")
    truth = np.array([poses[i].to_state() for i in idx])
    thr = tuple(float(x) for x in args.thresholds.split(","))
    if any(t <= 0 for t in thr) or any(b <= a for a, b in zip(thr, thr[1:])):
        raise SpecError("thresholds must be positive and strictly increasing")
    err, frac, div = ev.evaluate_rows(rows, truth, thr, args.burn_in, args.metric == "horizontal")
    report = {"thresholds": list(thr), "fractions": [float(x) for x in frac], "burn_in": args.burn_in,
              "metric": args.metric, "steps": int(len(err)), "diverged": bool(div),
              "median_error": float(np.median(err[args.burn_in:]))}
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_DIVERGED if div else EXIT_OK


def cmd_storage(args) -> int:
    sem = load_map(args.map)
    den = load_map(args.dense) if args.dense else None
    text = json.dumps(ev.storage_report(sem, den), indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_run(args) -> int:
    path = Path(args.spec)
    spec = ev.ExperimentSpec.from_ini(path.read_text(), base_dir=path.parent)
    if args.output:
        spec.output = args.output
    report = ev.run_experiment(spec)
    return EXIT_DIVERGED if report.any_diverged else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="semloc", description="Semantic map localization toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="world config -> dataset files")
    s.add_argument("--world", help="world INI file (default: built-in world)")
    s.add_argument("--out", required=True, help="dataset directory")
    s.add_argument("--seed", type=int, help="override the world seed")
    s.add_argument("--conditions", default="all", help="comma-separated condition names (default: all)")
    s.add_argument("--steps", type=int, default=0, help="steps per sequence (default 0: whole route)")
    s.add_argument("--labels", choices=("packed", "pgm"), default="packed", help="label raster format")
    s.set_defaults(func=cmd_simulate)

    m = sub.add_parser("map", help="dataset -> semantic and dense map files")
    m.add_argument("--data", required=True, help="dataset directory from 'simulate'")
    m.add_argument("--out", required=True, help="output directory")
    m.add_argument("--seed", type=int, help="seed for map point noise (default: world seed)")
    m.set_defaults(func=cmd_map)

    lo = sub.add_parser("localize", help="map + sequence -> pose CSV")
    lo.add_argument("--map", required=True)
    lo.add_argument("--world", help="world INI with the camera rig (default: built-in)")
    lo.add_argument("--odometry", required=True)
    lo.add_argument("--labels", help="packed label sequence or PGM directory (semantic map)")
    lo.add_argument("--features", help="sparse feature sequence (dense map)")
    lo.add_argument("--init", required=True, help="trajectory CSV (first row) or e,n,u,yaw,pitch,roll")
    lo.add_argument("--particles", type=int, default=500)
    lo.add_argument("--seed", type=int, default=0)
    lo.add_argument("--out", required=True, help="pose CSV")
    lo.set_defaults(func=cmd_localize)

    e = sub.add_parser("evaluate", help="pose CSV + truth -> error report")
    e.add_argument("--poses", required=True)
    e.add_argument("--truth", required=True, help="trajectory CSV")
    e.add_argument("--thresholds", default="0.5,1,2")
    e.add_argument("--burn-in", type=int, default=50)
    e.add_argument("--metric", choices=("horizontal", "3d"), default="horizontal")
    e.add_argument("--out", help="JSON report (default: stdout)")
    e.set_defaults(func=cmd_evaluate)

    st = sub.add_parser("storage", help="bytes per map point by field")
    st.add_argument("--map", required=True, help="semantic map file")
    st.add_argument("--dense", help="matching dense-descriptor map file")
    st.add_argument("--out", help="JSON output (default: stdout)")
    st.set_defaults(func=cmd_storage)

    r = sub.add_parser("run", help="full experiment from an experiment INI")
    r.add_argument("--spec", required=True)
    r.add_argument("--output", help="override the output directory")
    r.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (SpecError, ev.ExperimentSpecError, MapFormatError, SequenceFormatError, OSError, ValueError) as e:
        print(f"semloc: error: {e}", file=sys.stderr)
        return EXIT_SPEC


if __name__ == "__main__":
    raise SystemExit(main())
