"""Sequences, the mapping pass and map construction.

All randomness is drawn from substreams keyed by ``(seed, purpose,
condition index[, frame index])`` so any frame can be re-rendered on its
own and sequences never share random state.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import in_wedge_arrays
from ..motion import OdometrySimConfig, simulate_odometry
from ..semantic_filter import SegmentedImage
from ..semantic_map import (DYNAMIC_CLASSES, SemanticMap, class_prior_from_images, map_from_arrays,
                            occluded_pmf)
from .render import (ConditionModel, condition_appearance, default_conditions, random_cars, render_sparse,
                     renderer_for, unoccluded)
from .world import CLASS_ID, Drive, World, WorldConfig, generate_drive, generate_geometry

PATCH = 7

# substream purposes
_GEOMETRY, _DRIVE, _ODOMETRY, _APPEARANCE, _FRAME, _MAP_NOISE = range(6)


def substream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


@dataclass
class Frame:
    images: list
    features: list


class Sequence:
    """One traversal under one condition; frames are rendered on demand.

    ``odometry[k]`` carries ``drive.poses[k]`` to ``drive.poses[k + 1]``;
    ``frame(k)`` observes ``drive.poses[k]``.
    """

    def __init__(self, world: World, condition: ConditionModel, index: int, seed: int,
                 drive: Drive, odometry: list, appearance: np.ndarray):
        self.world = world
        self.condition = condition
        self.index = index
        self.seed = seed
        self.drive = drive
        self.odometry = odometry
        self.appearance = appearance

    def __len__(self):
        return len(self.odometry)

    @property
    def name(self) -> str:
        return self.condition.name

    def frame(self, k: int, with_tracks: bool = False) -> Frame:
        pose = self.drive.poses[k]
        t = float(self.drive.times[k])
        rng = substream(self.seed, _FRAME, self.index, k)
        cars = random_cars(self.world, pose, rng, self.condition.car_rate)
        images, feats = [], []
        for cam in self.world.cameras:
            lab, depth = renderer_for(self.world, cam).render_truth(pose, cars)
            images.append(SegmentedImage(self.condition.noise.apply(lab, rng), cam.camera_id, t))
            visible = unoccluded(self.world, cam, pose, depth)[0]
            feats.append(render_sparse(pose, cam, self.world, self.condition, rng, self.appearance, t,
                                       visible, with_tracks))
        return Frame(images, feats)


def make_sequence(world: World, condition: ConditionModel, index: int, seed: int,
                  odometry_config: OdometrySimConfig | None = None, n_steps: int | None = None) -> Sequence:
    odometry_config = odometry_config or OdometrySimConfig()
    drive = generate_drive(world, substream(seed, _DRIVE, index), n_steps=n_steps)
    odo = simulate_odometry(drive.times, drive.poses, odometry_config, substream(seed, _ODOMETRY, index))
    app = condition_appearance(world, condition, substream(seed, _APPEARANCE, index))
    return Sequence(world, condition, index, seed, drive, odo, app)


def patch_histograms(labels, pixels, n_classes, size=PATCH):
    """Per-point class counts over ``size x size`` patches (clipped at borders)."""
    labels = np.asarray(labels)
    r = size // 2
    pad = np.pad(labels.astype(np.int64), r, constant_values=n_classes)
    u = np.floor(pixels[:, 0] + 0.5).astype(np.int64) + r
    v = np.floor(pixels[:, 1] + 0.5).astype(np.int64) + r
    off = np.arange(-r, r + 1)
    rows = (v[:, None] + off[None, :])[:, :, None]
    cols = (u[:, None] + off[None, :])[:, None, :]
    vals = pad[rows, cols].reshape(len(pixels), -1)
    out = np.zeros((len(pixels), n_classes + 1), dtype=np.int64)
    np.add.at(out, (np.repeat(np.arange(len(pixels)), vals.shape[1]), vals.ravel()), 1)
    return out[:, :n_classes]


def build_maps(world: World, drive: Drive, label_frames, feature_frames, seed: int,
               max_depth: float | None = None):
    """Semantic and dense-descriptor maps over the same landmarks.

    ``label_frames[k]`` / ``feature_frames[k]`` are the images / feature
    sets (with track ids) observed at ``drive.poses[k]``. Landmarks never
    observed keep a pure PMF of their true class and their base appearance.
    """
    cfg = world.config
    max_depth = cfg.map_max_depth if max_depth is None else max_depth
    C = len(world.class_table)
    L = world.n_landmarks
    cams = {c.camera_id: c for c in world.cameras}
    hist = np.zeros((L, C), dtype=np.int64)
    all_images = []
    for pose, images in zip(drive.poses, label_frames):
        for img in images:
            all_images.append(img.labels)
            cam = cams[img.camera_id]
            _, depth = renderer_for(world, cam).render_truth(pose)
            idx, px, d = unoccluded(world, cam, pose, depth)
            centre = (pose @ cam.extrinsic).translation
            keep = d <= max_depth
            keep &= in_wedge_arrays(centre[None, :2], world.positions[idx, :2], world.gamma_a[idx],
                                    world.span[idx], world.wedge_range[idx])[0]
            if keep.any():
                hist[idx[keep]] += patch_histograms(img.labels, px[keep], C)
    dim = world.appearance.shape[1]
    dsum = np.zeros((L, dim))
    dcount = np.zeros(L)
    for feats in feature_frames:
        for fs in feats:
            if fs.track_ids is None:
                raise ValueError("mapping features need track ids")
            tr = fs.track_ids >= 0
            np.add.at(dsum, fs.track_ids[tr], fs.descriptors[tr].astype(float))
            np.add.at(dcount, fs.track_ids[tr], 1.0)
    pmfs = np.zeros((L, C))
    seen = hist.sum(axis=1) > 0
    pmfs[seen] = hist[seen] / hist[seen].sum(axis=1, keepdims=True)
    pmfs[~seen, world.classes[~seen]] = 1.0
    dense = np.where(dcount[:, None] > 0, dsum / np.maximum(dcount, 1.0)[:, None], world.appearance)
    dense = np.clip(np.rint(dense), 0, 255).astype(np.uint8)

    noise = substream(cfg.seed if seed is None else seed, _MAP_NOISE).normal(0.0, cfg.map_position_noise, (L, 3))
    positions = world.positions + noise
    wedges = np.column_stack([world.rho, world.gamma_a, world.gamma_a + world.span, world.wedge_range])
    prior = class_prior_from_images(all_images, C) if all_images else np.full(C, 1.0 / C)
    occluded = occluded_pmf(prior, [CLASS_ID[c] for c in DYNAMIC_CLASSES])
    road = drive.states()
    sem = map_from_arrays(world.class_table, positions, wedges, prior, occluded, road, sem_pmfs=pmfs)
    den = map_from_arrays(world.class_table, positions, wedges, prior, occluded, road, dense=dense)
    return sem, den


@dataclass
class Scenario:
    world: World
    conditions: list
    seed: int
    mapping: Sequence
    semantic_map: SemanticMap
    dense_map: SemanticMap

    def sequence(self, index: int, odometry_config=None, n_steps=None) -> Sequence:
        return make_sequence(self.world, self.conditions[index], index, self.seed, odometry_config, n_steps)


def mapping_frames(seq: Sequence):
    frames = [seq.frame(k, with_tracks=True) for k in range(len(seq.drive.poses))]
    return [f.images for f in frames], [f.features for f in frames]


def world_from_config(cfg: WorldConfig, seed: int | None = None) -> World:
    """World geometry for ``cfg`` drawn from the geometry substream of ``seed``."""
    return generate_geometry(cfg, substream(cfg.seed if seed is None else seed, _GEOMETRY))


def build_scenario(cfg: WorldConfig, conditions=None, seed: int | None = None) -> Scenario:
    """World geometry, the mapping traversal (condition 0) and both maps."""
    seed = cfg.seed if seed is None else int(seed)
    conditions = default_conditions(19) if conditions is None else list(conditions)
    world = world_from_config(cfg, seed)
    mapping = make_sequence(world, conditions[0], 0, seed)
    labels, feats = mapping_frames(mapping)
    sem, den = build_maps(world, mapping.drive, labels, feats, seed)
    return Scenario(world, conditions, seed, mapping, sem, den)


def generate_world(cfg: WorldConfig, rng=None):
    """Semantic map and ground-truth mapping trajectory for ``cfg``.

    ``rng`` may be a seed or a Generator (one integer is drawn from it);
    by default ``cfg.seed`` is used.
    """
    if isinstance(rng, np.random.Generator):
        seed = int(rng.integers(2**31))
    else:
        seed = cfg.seed if rng is None else int(rng)
    sc = build_scenario(cfg, seed=seed)
    return sc.semantic_map, sc.mapping.drive
