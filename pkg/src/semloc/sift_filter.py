"""Descriptor-based reference localizer: matching, P3P RANSAC and a UKF.

Image features are matched to the local map by nearest neighbour with
Lowe's ratio test, culled by 3-point RANSAC on reprojection error, and the
surviving inliers update a six-state unscented Kalman filter
``[e, n, u, yaw, pitch, roll]``. Frames without enough inliers leave the
filter dead-reckoning on odometry.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraModel, Pose
from .motion import MotionNoiseConfig, OdometryReading, project_to_road_arrays, propagate
from .semantic_map import SemanticMap, potentially_visible_set
from . import ukf as unscented
from .ukf import UnscentedParams, make_pd, ukf_predict

ANGLES = (3, 4, 5)


@dataclass(frozen=True, eq=False)
class SparseFeatureSet:
    """Detections in one image: distorted normalized coordinates and descriptors."""

    coords: np.ndarray
    descriptors: np.ndarray
    camera_id: int = 0
    t: float = 0.0
    track_ids: np.ndarray | None = None

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=float).reshape(-1, 2)
        d = np.asarray(self.descriptors)
        if len(c):
            d = d.reshape(len(c), -1)
        else:
            d = d.reshape(0, d.shape[-1] if d.ndim == 2 else 0)
        if not np.all(np.isfinite(c)):
            raise ValueError("feature coordinates must be finite")
        object.__setattr__(self, "coords", c)
        object.__setattr__(self, "descriptors", d)

    def __len__(self):
        return len(self.coords)


@dataclass
class SiftFilterConfig:
    sigma_px: float = 2.0
    lowe_ratio: float = 0.8
    ransac_inlier_px: float = 6.0
    min_inliers: int = 7
    ransac_iters: int = 200
    ransac_confidence: float = 0.9999
    gate_prob: float = 0.999
    unscented: UnscentedParams = field(default_factory=UnscentedParams)
    motion: MotionNoiseConfig = field(default_factory=MotionNoiseConfig)

    def __post_init__(self):
        if not 0.0 < self.lowe_ratio < 1.0:
            raise ValueError("lowe_ratio must lie in (0, 1)")
        if self.min_inliers < 4:
            raise ValueError("min_inliers must be at least 4")


# matching --------------------------------------------------------------------

def match(features, map_descriptors, lowe_ratio: float = 0.8):
    """Nearest-neighbour matches passing the ratio test.

    Returns ``(feature_idx, map_idx)``. With a single map descriptor every
    nearest neighbour is accepted; exact ties (ratio 1) are rejected.
    """
    f = np.asarray(getattr(features, "descriptors", features), dtype=float)
    m = np.asarray(map_descriptors, dtype=float)
    empty = np.zeros(0, dtype=np.int64)
    if len(f) == 0 or len(m) == 0:
        return empty, empty
    d2 = np.empty((len(f), len(m)))
    step = max(1, 2_000_000 // (len(m) * max(m.shape[1], 1)))
    for s in range(0, len(f), step):
        diff = f[s:s + step, None, :] - m[None, :, :]
        d2[s:s + step] = np.einsum("ijk,ijk->ij", diff, diff)
    nn = np.argmin(d2, axis=1)
    rows = np.arange(len(f))
    if len(m) == 1:
        return rows, nn
    best = d2[rows, nn]
    d2[rows, nn] = np.inf
    second = d2.min(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.sqrt(best) / np.sqrt(second)
    keep = np.where(second > 0, ratio < lowe_ratio, False)
    return rows[keep], nn[keep]


# P3P -------------------------------------------------------------------------

def _polish(coeffs, v, iters=3):
    for _ in range(iters):
        p = np.polyval(coeffs, v)
        dp = np.polyval(np.polyder(coeffs), v)
        if dp == 0:
            break
        v = v - p / dp
    return v


def _refine_depths(s, cosines, d2, iters=4):
    """Gauss-Newton on the three law-of-cosines constraints."""
    pairs = ((1, 2), (0, 2), (0, 1))
    for _ in range(iters):
        f = np.empty(3)
        J = np.zeros((3, 3))
        for k, (i, j) in enumerate(pairs):
            f[k] = s[i] ** 2 + s[j] ** 2 - 2 * s[i] * s[j] * cosines[k] - d2[k]
            J[k, i] = 2 * s[i] - 2 * s[j] * cosines[k]
            J[k, j] = 2 * s[j] - 2 * s[i] * cosines[k]
        try:
            s = s - np.linalg.solve(J, f)
        except np.linalg.LinAlgError:
            break
    return s


def _rigid_from_triplet(world, cam):
    """R, t with ``cam = R @ world + t`` for three non-collinear pairs."""
    cw = world.mean(axis=0)
    cc = cam.mean(axis=0)
    H = (world - cw).T @ (cam - cc)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return R, cc - R @ cw


def p3p(bearings, world_points):
    """Grunert's P3P: camera poses consistent with three 2D-3D pairs.

    ``bearings`` are camera-frame ray directions ``(3, 3)``. Returns a list
    of ``(R, t)`` with ``X_cam = R @ X_world + t`` (at most four).
    """
    j = np.asarray(bearings, dtype=float)
    j = j / np.linalg.norm(j, axis=1, keepdims=True)
    P = np.asarray(world_points, dtype=float)
    a2 = np.sum((P[1] - P[2]) ** 2)
    b2 = np.sum((P[0] - P[2]) ** 2)
    c2 = np.sum((P[0] - P[1]) ** 2)
    if min(a2, b2, c2) < 1e-18:
        return []
    ca, cb, cg = j[1] @ j[2], j[0] @ j[2], j[0] @ j[1]
    amc = (a2 - c2) / b2
    apc = (a2 + c2) / b2
    coeffs = np.array([
        (amc - 1) ** 2 - 4 * c2 / b2 * ca**2,
        4 * (amc * (1 - amc) * cb - (1 - apc) * ca * cg + 2 * c2 / b2 * ca**2 * cb),
        2 * (amc**2 - 1 + 2 * amc**2 * cb**2 + 2 * (b2 - c2) / b2 * ca**2
             - 4 * apc * ca * cb * cg + 2 * (b2 - a2) / b2 * cg**2),
        4 * (-amc * (1 + amc) * cb + 2 * a2 / b2 * cg**2 * cb - (1 - apc) * ca * cg),
        (1 + amc) ** 2 - 4 * a2 / b2 * cg**2,
    ])
    if not np.all(np.isfinite(coeffs)) or abs(coeffs[0]) < 1e-300:
        return []
    out = []
    for root in np.roots(coeffs):
        root = _polish(coeffs, root)
        if abs(root.imag) > 1e-9 * max(1.0, abs(root)):
            continue
        v = root.real
        den = 2 * (cg - v * ca)
        q = 1 + v * v - 2 * v * cb
        if abs(den) < 1e-15 or q <= 0:
            continue
        u = ((-1 + amc) * v**2 - 2 * amc * cb * v + 1 + amc) / den
        s1 = np.sqrt(b2 / q)
        s = _refine_depths(np.array([s1, u * s1, v * s1]), (ca, cb, cg), (a2, b2, c2))
        if not np.all(np.isfinite(s)) or np.any(s <= 0):
            continue
        R, t = _rigid_from_triplet(P, j * s[:, None])
        out.append((R, t))
    return out


# RANSAC ----------------------------------------------------------------------

@dataclass
class RansacResult:
    success: bool
    inliers: np.ndarray
    camera_from_world: Pose | None
    vehicle_pose: Pose | None
    iterations: int

    @property
    def n_inliers(self) -> int:
        return int(self.inliers.sum())


def reprojection_errors_px(camera: CameraModel, R, t, coords, world):
    """Pixel distance between observed and reprojected points (inf if behind)."""
    pc = world @ R.T + t
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = camera.distort(pc[:, :2] / z[:, None])
    du = (uv[:, 0] - coords[:, 0]) * camera.fx
    dv = (uv[:, 1] - coords[:, 1]) * camera.fy
    err = np.hypot(du, dv)
    return np.where((z > 0) & np.isfinite(err), err, np.inf)


def ransac_pose(coords, world, camera: CameraModel, config: SiftFilterConfig, rng) -> RansacResult:
    """3-point RANSAC over 2D-3D correspondences from one camera.

    Succeeds only when the best hypothesis has strictly more than
    ``config.min_inliers`` inliers.
    """
    coords = np.asarray(coords, dtype=float).reshape(-1, 2)
    world = np.asarray(world, dtype=float).reshape(-1, 3)
    n = len(coords)
    none = np.zeros(n, dtype=bool)
    if n < 3:
        return RansacResult(False, none, None, None, 0)
    rays = np.column_stack([camera.undistort(coords), np.ones(n)])
    best = none
    best_pose = None
    needed = config.ransac_iters
    it = 0
    while it < min(needed, config.ransac_iters):
        it += 1
        sample = rng.choice(n, 3, replace=False)
        for R, t in p3p(rays[sample], world[sample]):
            inl = reprojection_errors_px(camera, R, t, coords, world) < config.ransac_inlier_px
            if inl.sum() > best.sum():
                best, best_pose = inl, (R, t)
                w = best.sum() / n
                if w >= 1.0:
                    needed = it
                else:
                    needed = int(np.ceil(np.log(1 - config.ransac_confidence) / np.log(1 - w**3)))
    if best_pose is None or best.sum() <= config.min_inliers:
        return RansacResult(False, best, None, None, it)
    R, t = best_pose
    cam_from_world = Pose(R, t)
    vehicle = cam_from_world.inverse() @ camera.extrinsic.inverse()
    return RansacResult(True, best, cam_from_world, vehicle, it)


# UKF -------------------------------------------------------------------------

@dataclass
class UkfState:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).reshape(6)
        self.cov = np.asarray(self.cov, dtype=float).reshape(6, 6)

    @property
    def pose(self) -> Pose:
        return Pose.from_state(*self.mean)


def _process_noise(mean, odo: OdometryReading, motion: MotionNoiseConfig):
    Q = np.zeros((6, 6))
    yaw = mean[3]
    c, s = np.cos(yaw), np.sin(yaw)
    Rz = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
    Q[:3, :3] = odo.dt * Rz @ np.asarray(motion.Q_v) @ Rz.T
    # body rates (x, y, z) drive (roll, pitch, yaw)
    perm = np.array([[0, 0, 1], [0, 1, 0], [1, 0, 0]], dtype=float)
    Q[3:, 3:] = odo.dt * perm @ np.asarray(motion.Q_omega) @ perm.T
    return Q


def ukf_time_update(state: UkfState, odo: OdometryReading, config: SiftFilterConfig) -> UkfState:
    zero = MotionNoiseConfig.zero()

    def f(x):
        return propagate(Pose.from_state(*x), odo, zero).to_state()

    mean, cov = ukf_predict(state.mean, state.cov, f, _process_noise(state.mean, odo, config.motion),
                            config.unscented, ANGLES)
    return UkfState(mean, cov)


def _project_raw(camera: CameraModel, x, points):
    pc = camera.world_to_camera(Pose.from_state(*x)).apply(points)
    return camera.distort(pc[:, :2] / pc[:, 2:3])


def ukf_update(state: UkfState, coords, points, camera: CameraModel, sigma_pi: float,
               config: SiftFilterConfig | None = None):
    """Measurement update with stacked projections of the inlier landmarks.

    Returns ``(UkfState, UpdateResult)``; a gated update leaves the state as is.
    """
    config = config or SiftFilterConfig()
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    z = np.asarray(coords, dtype=float).reshape(-1, 2).ravel()
    R = np.eye(z.size) * sigma_pi**2
    res = unscented.ukf_update(state.mean, state.cov, z, lambda x: _project_raw(camera, x, pts).ravel(),
                               R, config.unscented, ANGLES, config.gate_prob)
    return UkfState(res.mean, res.cov), res


@dataclass
class SiftStepInfo:
    n_local: int = 0
    n_matches: int = 0
    n_inliers: int = 0
    updated: bool = False
    gated: int = 0


class SiftFilter:
    """UKF localizer over a dense-descriptor map."""

    def __init__(self, smap: SemanticMap, cameras, config: SiftFilterConfig | None = None, rng=None):
        if not smap.is_dense:
            raise ValueError("the descriptor filter needs a dense-descriptor map")
        self.map = smap
        self.cameras = {c.camera_id: c for c in cameras}
        self.config = config or SiftFilterConfig()
        self.rng = rng if rng is not None else np.random.default_rng()
        self.state: UkfState | None = None
        self.gated = 0

    def initialize(self, mean, cov):
        self.state = UkfState(mean, cov)

    def local_map(self, mean) -> np.ndarray:
        near = potentially_visible_set(self.map, mean[:3])
        road_pos, _ = project_to_road_arrays(mean[None, :3], self.map.road)
        on_road = potentially_visible_set(self.map, road_pos[0])
        return np.union1d(near, on_road)

    def step(self, odo: OdometryReading | None, frames) -> SiftStepInfo:
        cfg = self.config
        if odo is not None:
            self.state = ukf_time_update(self.state, odo, cfg)
        info = SiftStepInfo()
        local = self.local_map(self.state.mean)
        info.n_local = int(local.size)
        if local.size == 0:
            return info
        for feats in frames:
            if len(feats) == 0:
                continue
            camera = self.cameras[feats.camera_id]
            fi, mi = match(feats, self.map.dense[local], cfg.lowe_ratio)
            info.n_matches += int(fi.size)
            if fi.size < 3:
                continue
            world = self.map.positions[local[mi]]
            res = ransac_pose(feats.coords[fi], world, camera, cfg, self.rng)
            if not res.success:
                continue
            info.n_inliers += res.n_inliers
            sigma_pi = cfg.sigma_px / camera.fx
            self.state, upd = ukf_update(self.state, feats.coords[fi][res.inliers],
                                         world[res.inliers], camera, sigma_pi, cfg)
            if upd.accepted:
                info.updated = True
            else:
                self.gated += 1
                info.gated += 1
        return info


def sift_step(state: UkfState, odo, frames, smap: SemanticMap, cameras, config: SiftFilterConfig, rng):
    """Functional form of :meth:`SiftFilter.step`; returns ``(state, info)``."""
    f = SiftFilter(smap, cameras, config, rng)
    f.state = state
    info = f.step(odo, frames)
    return f.state, info


def initial_covariance(std) -> np.ndarray:
    return make_pd(np.diag(np.asarray(std, dtype=float) ** 2))
