import json
import subprocess
import sys

import numpy as np
import pytest

from semloc.cli import main
from semloc.evaluation import read_pose_csv, write_pose_csv
from semloc.geometry import Pose
from semloc.motion import read_trajectory_csv, write_trajectory_csv
from semloc.sim.world import WorldConfig

WORLD = WorldConfig(route="straight", route_length=100.0, seed=7)


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def pipeline(root, labels="packed"):
    root.mkdir(parents=True, exist_ok=True)
    (root / "world.ini").write_text(WORLD.to_ini())
    data, maps = root / "data", root / "maps"
    assert main(["simulate", "--world", str(root / "world.ini"), "--out", str(data), "--conditions", "may",
                 "--labels", labels]) == 0
    assert main(["map", "--data", str(data), "--out", str(maps)]) == 0
    seq = next(data.glob("*_may"))
    lab = seq / ("labels.slbl" if labels == "packed" else "labels")
    common = ["--world", str(root / "world.ini"), "--odometry", str(seq / "odometry.csv"),
              "--init", str(seq / "trajectory.csv")]
    assert main(["localize", "--map", str(maps / "semantic.smap"), "--labels", str(lab), *common,
                 "--particles", "200", "--out", str(root / "sem.csv")]) == 0
    assert main(["localize", "--map", str(maps / "dense.smap"), "--features", str(seq / "features.sfea"), *common,
                 "--out", str(root / "sift.csv")]) == 0
    for name in ("sem", "sift"):
        assert main(["evaluate", "--poses", str(root / f"{name}.csv"), "--truth", str(seq / "trajectory.csv"),
                     "--burn-in", "10", "--out", str(root / f"{name}.json")]) == 0
    assert main(["storage", "--map", str(maps / "semantic.smap"), "--dense", str(maps / "dense.smap"),
                 "--out", str(root / "storage.json")]) == 0
    return seq


@pytest.fixture(scope="module")
def two_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    seq = pipeline(base / "a")
    pipeline(base / "b")
    return base, seq


def test_pipeline_byte_identical(two_runs):
    base, _ = two_runs
    a, b = tree_bytes(base / "a"), tree_bytes(base / "b")
    assert a.keys() == b.keys() and len(a) > 10
    assert all(a[k] == b[k] for k in a)


def test_pipeline_outputs(two_runs):
    base, seq = two_runs
    rows = read_pose_csv(base / "a" / "sem.csv")
    times, _ = read_trajectory_csv(seq / "trajectory.csv")
    assert np.array_equal(rows[:, 0], times[1:])
    for name in ("sem", "sift"):
        rep = json.loads((base / "a" / f"{name}.json").read_text())
        assert rep["fractions"][1] > 0.8 and not rep["diverged"]
    st = json.loads((base / "a" / "storage.json").read_text())
    assert st["semantic_descriptor_bits"] == 39 and st["dense_descriptor_bytes"] == 128
    m = json.loads((base / "a" / "maps" / "semantic.json").read_text())
    assert len(m["points"]) == st["points"]


def test_pgm_labels_pipeline(tmp_path):
    seq = pipeline(tmp_path, labels="pgm")
    assert any((seq / "labels").glob("frame_000000_cam0.pgm"))


def test_run_verb_deterministic(tmp_path):
    (tmp_path / "w.ini").write_text(WORLD.to_ini())
    (tmp_path / "exp.ini").write_text("[experiment]\nworld = w.ini\nfilters = both\nconditions = sep, may\n"
                                      "burn_in = 10\nparticles = 200\nseed = 3\noutput = out\n")
    for out in ("r1", "r2"):
        assert main(["run", "--spec", str(tmp_path / "exp.ini"), "--output", str(tmp_path / out)]) == 0
    a, b = tree_bytes(tmp_path / "r1"), tree_bytes(tmp_path / "r2")
    assert a == b and "report.json" in a


def test_exit_code_divergence(tmp_path):
    times = 0.2 * np.arange(151)
    poses = [Pose.from_state(1.6 * k, 0, 1.6, 0, 0, 0) for k in range(151)]
    write_trajectory_csv(tmp_path / "truth.csv", times, poses)
    far = [(t, p.translation[0] + 80.0, *p.translation[1:], 0, 0, 0, 1.0, 0) for t, p in zip(times[1:], poses[1:])]
    write_pose_csv(tmp_path / "far.csv", far)
    near = [(t, *p.to_state(), 1.0, 0) for t, p in zip(times[1:], poses[1:])]
    write_pose_csv(tmp_path / "near.csv", near)
    args = ["--truth", str(tmp_path / "truth.csv"), "--burn-in", "0"]
    assert main(["evaluate", "--poses", str(tmp_path / "far.csv"), *args]) == 2
    assert main(["evaluate", "--poses", str(tmp_path / "near.csv"), *args]) == 0


@pytest.mark.parametrize("argv", [
    [],
    ["frobnicate"],
    ["simulate"],
    ["storage", "--map", "/nonexistent/map.smap"],
    ["run", "--spec", "/nonexistent/spec.ini"],
    ["localize", "--map", "/nonexistent", "--odometry", "x", "--init", "1,2", "--out", "y"],
])
def test_exit_code_spec_errors(argv, capsys):
    try:
        code = main(argv)
    except SystemExit as e:
        code = e.code
    assert code == 1


def test_exit_code_bad_thresholds_and_bad_spec(tmp_path, two_runs):
    base, seq = two_runs
    assert main(["evaluate", "--poses", str(base / "a" / "sem.csv"), "--truth", str(seq / "trajectory.csv"),
                 "--thresholds", "1,0.5"]) == 1
    (tmp_path / "bad.ini").write_text("[experiment]\nthresholds = 2, 1\n")
    assert main(["run", "--spec", str(tmp_path / "bad.ini")]) == 1
    (tmp_path / "garbage.smap").write_bytes(b"not a map")
    assert main(["storage", "--map", str(tmp_path / "garbage.smap")]) == 1


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "semloc", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "simulate" in out.stdout
