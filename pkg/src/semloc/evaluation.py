"""Metrics, storage accounting and the mapping + multi-condition experiment."""
from __future__ import annotations

import configparser
import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Pose
from .mapfile import (DENSE_DESCRIPTOR_BYTES, POSITION_BYTES, SEMANTIC_DESCRIPTOR_BITS, SEMANTIC_DESCRIPTOR_BYTES,
                      VISIBILITY_BYTES)
from .semantic_filter import SemanticFilter, SemanticFilterConfig
from .semantic_map import SemanticMap
from .sift_filter import SiftFilter, SiftFilterConfig, initial_covariance
from .sim.dataset import Scenario, build_scenario, substream
from .sim.render import default_conditions
from .sim.world import WorldConfig

log = logging.getLogger(__name__)

POSE_COLUMNS = ("t", "e", "n", "u", "yaw", "pitch", "roll", "ess", "n_lambda")
DEFAULT_THRESHOLDS = (0.5, 1.0, 2.0)
DEFAULT_INIT_STD = (0.5, 0.5, 0.05, 0.02, 0.005, 0.005)
DIVERGENCE_M = 50.0
DIVERGENCE_STEPS = 100
FILTERS = ("semantic", "sift")


class ExperimentSpecError(ValueError):
    """Invalid experiment or world configuration."""


# metrics ---------------------------------------------------------------------

def error_histogram(trace, thresholds=DEFAULT_THRESHOLDS) -> np.ndarray:
    """Fraction of errors strictly below each threshold."""
    trace = np.asarray(trace, dtype=float).ravel()
    if trace.size == 0:
        raise ValueError("error trace is empty")
    thr = np.asarray(thresholds, dtype=float)
    return (trace[:, None] < thr[None, :]).mean(axis=0)


def position_errors(estimates, truths, horizontal: bool = True) -> np.ndarray:
    """Per-step distance between estimated and true positions (``(N, >=3)`` arrays)."""
    est = np.asarray(estimates, dtype=float)[:, :3]
    tru = np.asarray(truths, dtype=float)[:, :3]
    d = est - tru
    return np.hypot(d[:, 0], d[:, 1]) if horizontal else np.linalg.norm(d, axis=1)


def along_track_errors(estimates, truth_poses) -> np.ndarray:
    """Signed error component along each true heading."""
    est = np.asarray(estimates, dtype=float)[:, :2]
    tru = np.array([p.translation[:2] for p in truth_poses])
    yaw = np.array([p.yaw for p in truth_poses])
    return (est[:, 0] - tru[:, 0]) * np.cos(yaw) + (est[:, 1] - tru[:, 1]) * np.sin(yaw)


def diverged(errors, threshold=DIVERGENCE_M, sustain=DIVERGENCE_STEPS) -> bool:
    """True when the error stays above ``threshold`` for ``sustain`` consecutive steps."""
    run = 0
    for bad in np.asarray(errors, dtype=float) > threshold:
        run = run + 1 if bad else 0
        if run >= sustain:
            return True
    return False


def storage_report(smap: SemanticMap, dense_variant: SemanticMap | None = None) -> dict:
    """Bytes per map point by field for the semantic and dense variants."""
    if smap.is_dense:
        raise ValueError("first map must carry semantic descriptors")
    if dense_variant is not None:
        if not dense_variant.is_dense:
            raise ValueError("second map must carry dense descriptors")
        if len(dense_variant) != len(smap):
            raise ValueError("maps are not matched (different point counts)")
        if dense_variant.dense.shape[1] != DENSE_DESCRIPTOR_BYTES:
            raise ValueError("dense descriptors must be 128 bytes")
    assert SEMANTIC_DESCRIPTOR_BITS <= 8 * SEMANTIC_DESCRIPTOR_BYTES <= 40
    naive = smap.n_classes
    sem_total = POSITION_BYTES + VISIBILITY_BYTES + SEMANTIC_DESCRIPTOR_BYTES
    dense_total = POSITION_BYTES + VISIBILITY_BYTES + DENSE_DESCRIPTOR_BYTES
    return {
        "points": len(smap),
        "n_classes": smap.n_classes,
        "position_bytes": POSITION_BYTES,
        "visibility_bytes": VISIBILITY_BYTES,
        "semantic_descriptor_bits": SEMANTIC_DESCRIPTOR_BITS,
        "semantic_descriptor_bytes": SEMANTIC_DESCRIPTOR_BYTES,
        "naive_semantic_descriptor_bytes": naive,
        "dense_descriptor_bytes": DENSE_DESCRIPTOR_BYTES,
        "semantic_record_bytes": sem_total,
        "dense_record_bytes": dense_total,
        "dense_to_naive_semantic_ratio": DENSE_DESCRIPTOR_BYTES / naive,
        "dense_to_semantic_descriptor_ratio": DENSE_DESCRIPTOR_BYTES * 8 / SEMANTIC_DESCRIPTOR_BITS,
        "semantic_map_bytes": sem_total * len(smap),
        "dense_map_bytes": dense_total * len(smap),
    }


# pose CSV --------------------------------------------------------------------

def write_pose_csv(path, rows) -> None:
    """``rows`` of ``(t, e, n, u, yaw, pitch, roll, ess, n_lambda)``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(POSE_COLUMNS)
        for r in rows:
            w.writerow([repr(float(x)) for x in r])


def read_pose_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return np.zeros((0, len(POSE_COLUMNS)))
    missing = set(POSE_COLUMNS) - set(rows[0])
    if missing:
        raise ValueError(f"pose CSV lacks columns {sorted(missing)}")
    return np.array([[float(r[c]) for c in POSE_COLUMNS] for r in rows])


# localization runs ------------------------------------------------------------

def run_semantic(smap, cameras, initial: Pose, odometry, frames, config=None, rng=None,
                 init_std=DEFAULT_INIT_STD, times=None):
    """Run the particle filter; ``frames[k]`` are the images after ``odometry[k]``.

    ``frames`` may be a callable ``k -> images``. Returns pose CSV rows.
    """
    pf = SemanticFilter(smap, cameras, config or SemanticFilterConfig(), rng)
    pf.initialize(initial, init_std)
    rows = []
    for k, odo in enumerate(odometry):
        images = frames(k) if callable(frames) else frames[k]
        info = pf.step(odo, images)
        est = pf.estimate().pose
        t = times[k] if times is not None else (images[0].t if images else float(k + 1))
        rows.append((t, *est.to_state(), info.ess, info.n_assigned_mean))
    return rows


def run_sift(dmap, cameras, initial: Pose, odometry, frames, config=None, rng=None,
             init_std=DEFAULT_INIT_STD, times=None):
    """Run the UKF reference filter; ``ess`` is NaN and ``n_lambda`` counts RANSAC inliers."""
    uk = SiftFilter(dmap, cameras, config or SiftFilterConfig(), rng)
    uk.initialize(initial.to_state(), initial_covariance(init_std))
    rows = []
    for k, odo in enumerate(odometry):
        feats = frames(k) if callable(frames) else frames[k]
        info = uk.step(odo, feats)
        t = times[k] if times is not None else (feats[0].t if feats else float(k + 1))
        rows.append((t, *uk.state.mean, np.nan, float(info.n_inliers)))
    return rows


# experiment ------------------------------------------------------------------

@dataclass
class ExperimentSpec:
    world: WorldConfig = field(default_factory=WorldConfig)
    filters: tuple = FILTERS
    conditions: tuple = tuple(c.name for c in default_conditions())
    thresholds: tuple = DEFAULT_THRESHOLDS
    output: str = "experiment-out"
    seed: int = 0
    burn_in: int = 50
    horizontal: bool = True
    particles: int = 500
    steps: int = 0                 # 0: the whole route
    world_path: str = ""

    def __post_init__(self):
        thr = np.asarray(self.thresholds, dtype=float)
        if thr.size == 0 or np.any(thr <= 0) or np.any(np.diff(thr) <= 0):
            raise ExperimentSpecError("thresholds must be positive and strictly increasing")
        bad = set(self.filters) - set(FILTERS)
        if bad or not self.filters:
            raise ExperimentSpecError(f"unknown filter selection {sorted(bad) or 'empty'}")
        known = {c.name for c in default_conditions()}
        unknown = [c for c in self.conditions if c not in known]
        if unknown:
            raise ExperimentSpecError(f"unknown conditions {unknown}; known: {sorted(known)}")
        if len(self.conditions) < 2:
            raise ExperimentSpecError("need a mapping condition and at least one localization condition")
        if self.burn_in < 0 or self.particles < 1 or self.steps < 0:
            raise ExperimentSpecError("burn_in, particles and steps must be nonnegative (particles positive)")

    @classmethod
    def from_ini(cls, text: str, base_dir=".") -> "ExperimentSpec":
        cp = configparser.ConfigParser()
        try:
            cp.read_string(text)
        except configparser.Error as e:
            raise ExperimentSpecError(str(e)) from e
        if not cp.has_section("experiment"):
            raise ExperimentSpecError("missing [experiment] section")
        sec = cp["experiment"]
        kw = {}
        try:
            world_path = sec.get("world", "").strip()
            if world_path:
                p = Path(base_dir) / world_path
                kw["world"] = WorldConfig.from_ini(p.read_text())
                kw["world_path"] = str(p)
            elif cp.has_section("world"):
                kw["world"] = WorldConfig.from_ini(text)
            if "filters" in sec:
                f = sec["filters"].strip()
                kw["filters"] = FILTERS if f == "both" else tuple(x.strip() for x in f.split(","))
            if "conditions" in sec:
                kw["conditions"] = tuple(x.strip() for x in sec["conditions"].split(",") if x.strip())
            if "thresholds" in sec:
                kw["thresholds"] = tuple(float(x) for x in sec["thresholds"].split(","))
            for key in ("seed", "burn_in", "particles", "steps"):
                if key in sec:
                    kw[key] = sec.getint(key)
            if "output" in sec:
                kw["output"] = str(Path(base_dir) / sec["output"].strip())
            if "metric" in sec:
                metric = sec["metric"].strip()
                if metric not in ("horizontal", "3d"):
                    raise ExperimentSpecError("metric must be horizontal or 3d")
                kw["horizontal"] = metric == "horizontal"
        except (OSError, ValueError) as e:
            if isinstance(e, ExperimentSpecError):
                raise
            raise ExperimentSpecError(str(e)) from e
        return cls(**kw)

    def condition_models(self) -> list:
        by_name = {c.name: c for c in default_conditions(19)}
        return [by_name[n] for n in self.conditions]


@dataclass
class SequenceResult:
    sequence: str
    filter: str
    fractions: list
    errors: np.ndarray
    diverged: bool
    rows: list


@dataclass
class RunReport:
    thresholds: tuple
    burn_in: int
    results: list
    storage: dict

    def fractions(self, sequence: str, filter_name: str) -> np.ndarray:
        for r in self.results:
            if r.sequence == sequence and r.filter == filter_name:
                return np.asarray(r.fractions)
        raise KeyError((sequence, filter_name))

    @property
    def any_diverged(self) -> bool:
        return any(r.diverged for r in self.results)

    def summary(self) -> dict:
        return {
            "thresholds": list(self.thresholds),
            "burn_in": self.burn_in,
            "sequences": [
                {"sequence": r.sequence, "filter": r.filter, "fractions": list(map(float, r.fractions)),
                 "median_error": float(np.median(r.errors[self.burn_in:])) if len(r.errors) > self.burn_in else None,
                 "diverged": bool(r.diverged), "steps": int(len(r.errors))}
                for r in self.results],
            "storage": self.storage,
        }


def localize_sequence(scenario: Scenario, index: int, filter_name: str, spec: ExperimentSpec):
    seq = scenario.sequence(index, n_steps=spec.steps or None)
    cams = scenario.world.cameras
    rng = substream(spec.seed, 100 + FILTERS.index(filter_name), index)
    times = seq.drive.times[1:]
    cache = {}

    def frame(k):
        if k not in cache:
            cache.clear()
            cache[k] = seq.frame(k + 1)
        return cache[k]

    if filter_name == "semantic":
        rows = run_semantic(scenario.semantic_map, cams, seq.drive.poses[0], seq.odometry,
                            lambda k: frame(k).images, SemanticFilterConfig(num_particles=spec.particles),
                            rng, times=times)
    else:
        rows = run_sift(scenario.dense_map, cams, seq.drive.poses[0], seq.odometry,
                        lambda k: frame(k).features, SiftFilterConfig(), rng, times=times)
    return seq, rows


def evaluate_rows(rows, truth_states, spec_or_thresholds, burn_in, horizontal=True):
    est = np.asarray(rows, dtype=float)[:, 1:7]
    err = position_errors(est, truth_states, horizontal)
    if len(err) <= burn_in:
        raise ValueError("trace shorter than the burn-in")
    return err, error_histogram(err[burn_in:], spec_or_thresholds), diverged(err)


def run_experiment(spec: ExperimentSpec, write: bool = True, scenario: Scenario | None = None) -> RunReport:
    """Map from the first condition, localize in every other one, report."""
    t0 = time.monotonic()
    conditions = spec.condition_models()
    if scenario is None:
        scenario = build_scenario(spec.world, conditions, spec.seed)
    log.info("mapping done: %d points (%.1fs)", len(scenario.semantic_map), time.monotonic() - t0)
    results = []
    for idx in range(1, len(conditions)):
        for fname in spec.filters:
            seq, rows = localize_sequence(scenario, idx, fname, spec)
            truth = seq.drive.states()[1:]
            err, frac, div = evaluate_rows(rows, truth, spec.thresholds, spec.burn_in, spec.horizontal)
            results.append(SequenceResult(seq.name, fname, [float(x) for x in frac], err, div, rows))
            log.info("%s/%s: fractions %s diverged=%s (%.1fs)", seq.name, fname,
                     np.round(frac, 3).tolist(), div, time.monotonic() - t0)
    report = RunReport(tuple(spec.thresholds), spec.burn_in, results,
                       storage_report(scenario.semantic_map, scenario.dense_map))
    if write:
        write_report(report, spec.output)
    return report


def write_report(report: RunReport, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n")
    with open(out / "errors.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("sequence", "filter", "step", "error"))
        for r in report.results:
            for k, e in enumerate(r.errors):
                w.writerow((r.sequence, r.filter, k, repr(float(e))))
    with open(out / "fractions.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("sequence", "filter", *(f"below_{t:g}m" for t in report.thresholds), "diverged"))
        for r in report.results:
            w.writerow((r.sequence, r.filter, *(repr(float(x)) for x in r.fractions), int(r.diverged)))
    with open(out / "storage.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("field", "value"))
        for k in sorted(report.storage):
            w.writerow((k, report.storage[k]))
    for r in report.results:
        write_pose_csv(out / f"poses_{r.sequence}_{r.filter}.csv", r.rows)
