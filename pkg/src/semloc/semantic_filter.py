"""Bootstrap particle filter driven by semantically segmented images.

Each particle projects the locally visible map points into the label
image; every pixel that receives a point contributes the ratio of the
point's class model to the marginal class PMF. The summed log-ratio is
tempered by ``scale / max(n_assigned, cutoff)`` before it is added to the
particle's log-weight.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .geometry import CameraModel, Pose, euler_to_rotation, nearest_rotation, project_batch, rotation_to_euler
from .motion import RENORMALIZE_EVERY, MotionNoiseConfig, OdometryReading, propagate_mixture_batch
from .semantic_map import SemanticMap, potentially_visible_set

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class SegmentedImage:
    """Dense per-pixel class labels from one camera, row-major ``(H, W)``."""

    labels: np.ndarray
    camera_id: int = 0
    t: float = 0.0

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise ValueError("labels must be a 2-D grid")
        object.__setattr__(self, "labels", labels.astype(np.uint8, copy=False))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


@dataclass
class SemanticFilterConfig:
    num_particles: int = 500
    occlusion_prob: float = 0.2
    scale: float = 3.0
    cutoff: int = 400
    resample_threshold: float = 0.5
    pmf_floor: float = 1e-3
    motion: MotionNoiseConfig = field(default_factory=MotionNoiseConfig)

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if self.cutoff < 1:
            raise ValueError("cutoff must be at least 1")
        if not 0.0 <= self.occlusion_prob < 1.0:
            raise ValueError("occlusion probability must lie in [0, 1)")
        if self.num_particles < 1:
            raise ValueError("need at least one particle")


@dataclass
class ParticleSet:
    """Weighted pose hypotheses; rotations ``(N,3,3)``, positions ``(N,3)``."""

    R: np.ndarray
    t: np.ndarray
    logw: np.ndarray
    seed: int | None = None

    def __len__(self):
        return len(self.t)

    @classmethod
    def around(cls, pose: Pose, std, n: int, rng, seed=None) -> "ParticleSet":
        """Gaussian cloud around ``pose`` with per-state std ``[e,n,u,yaw,pitch,roll]``."""
        s = pose.to_state()
        draws = s + rng.standard_normal((n, 6)) * np.asarray(std, dtype=float)
        R = euler_to_rotation(draws[:, 3], draws[:, 4], draws[:, 5])
        return cls(R, draws[:, :3].copy(), np.full(n, -np.log(n)), seed)

    @property
    def weights(self) -> np.ndarray:
        w = np.exp(self.logw - logsumexp(self.logw))
        return w / w.sum()

    def normalized(self) -> "ParticleSet":
        return ParticleSet(self.R, self.t, self.logw - logsumexp(self.logw), self.seed)

    def ess(self) -> float:
        w = self.weights
        return float(1.0 / np.sum(w * w))

    def pose(self, i: int) -> Pose:
        return Pose(self.R[i], self.t[i])


@dataclass
class PoseEstimate:
    pose: Pose
    position_cov: np.ndarray
    yaw_std: float


def estimate(particles: ParticleSet) -> PoseEstimate:
    """Weighted mean position, circular-mean yaw and position covariance."""
    w = particles.weights
    mean = w @ particles.t
    d = particles.t - mean
    cov = (d * w[:, None]).T @ d
    yaw, pitch, roll = rotation_to_euler(particles.R)
    s, c = w @ np.sin(yaw), w @ np.cos(yaw)
    mean_yaw = np.arctan2(s, c)
    # small-angle weighted means are adequate for pitch and roll
    R = euler_to_rotation(mean_yaw, w @ pitch, w @ roll)
    R_len = min(np.hypot(s, c), 1.0)
    yaw_std = float(np.sqrt(-2.0 * np.log(R_len))) if R_len > 0 else np.pi
    return PoseEstimate(Pose(R, mean), 0.5 * (cov + cov.T), yaw_std)


def systematic_resample(weights, rng) -> np.ndarray:
    """Indices drawn by systematic resampling (single uniform offset)."""
    n = len(weights)
    positions = (rng.random() + np.arange(n)) / n
    cum = np.cumsum(weights)
    cum[-1] = 1.0
    return np.searchsorted(cum, positions, side="right").clip(0, n - 1)


def detection_probability(visible, rho, occlusion_prob):
    """``Pr{delta = 1} = v * rho * (1 - P_o)``, elementwise."""
    return np.asarray(visible, dtype=float) * np.asarray(rho, dtype=float) * (1.0 - occlusion_prob)


def pixel_log_likelihood(label, visible_pmf, detected_prob, occluded_pmf):
    """Log class probability of one pixel holding a projected map point.

    Sums the visible and occluded cases weighted by the detection
    probability. ``visible_pmf`` should already be floored.
    """
    pv = np.asarray(visible_pmf, dtype=float)[..., label]
    po = np.asarray(occluded_pmf, dtype=float)[..., label]
    return np.log(pv * detected_prob + po * (1.0 - detected_prob))


def tempering_exponent(n_assigned, scale=3.0, cutoff=400):
    """Exponent applied to the image likelihood: ``scale / max(n, cutoff)``."""
    return scale / np.maximum(n_assigned, cutoff)


@dataclass
class Association:
    """Unique map-point-to-pixel assignment for one pose.

    ``pixels`` are flat row-major indices, ``points`` the assigned map point
    indices (into whatever array was projected).
    """

    pixels: np.ndarray
    points: np.ndarray
    depth: np.ndarray
    shape: tuple

    @property
    def n_assigned(self) -> int:
        return int(self.pixels.size)

    @property
    def lam(self) -> np.ndarray:
        """Dense per-pixel association: 0 for none, ``j + 1`` for point ``j``."""
        out = np.zeros(self.shape[0] * self.shape[1], dtype=np.int64)
        out[self.pixels] = self.points + 1
        return out


def pixel_indices(camera: CameraModel, uv):
    """Nearest integer pixel (col, row) for normalized coordinates."""
    px = camera.to_pixels(uv)
    with np.errstate(invalid="ignore"):
        col = np.floor(px[..., 0] + 0.5)
        row = np.floor(px[..., 1] + 0.5)
    return col, row


def associate_batch(camera: CameraModel, R, t, points, shape):
    """Per-particle unique assignment of projected points to pixels.

    Collisions keep the point with the smallest camera depth (ties: lower
    index). Returns ``(particle, pixel, point, depth)`` arrays.
    """
    h, w = shape
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    n = len(t)
    if len(pts) == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, empty, np.zeros(0)
    uv, depth = project_batch(camera, R, t, pts)
    col, row = pixel_indices(camera, uv)
    with np.errstate(invalid="ignore"):
        ok = (depth > 0) & (col >= 0) & (col < w) & (row >= 0) & (row < h)
    part, pt = np.nonzero(ok)
    pix = (row[part, pt] * w + col[part, pt]).astype(np.int64)
    dep = depth[part, pt]
    key = part.astype(np.int64) * (h * w) + pix
    order = np.lexsort((pt, dep, key))
    key = key[order]
    first = np.ones(key.size, dtype=bool)
    first[1:] = key[1:] != key[:-1]
    sel = order[first]
    return part[sel].astype(np.int64), pix[sel], pt[sel].astype(np.int64), dep[sel]


def associate(pose: Pose, camera: CameraModel, points, image_dims) -> Association:
    """Unique pixel assignment of ``points`` (``(M, 3)`` world positions)."""
    _, pix, pt, dep = associate_batch(camera, pose.rotation[None], pose.translation[None],
                                      points, image_dims)
    order = np.argsort(pix, kind="stable")
    return Association(pix[order], pt[order], dep[order], tuple(image_dims))


def floored_pmf(p, floor):
    p = np.maximum(np.asarray(p, dtype=float), floor)
    return p / p.sum(axis=-1, keepdims=True)


def batch_log_likelihood(labels_flat, particle, pixel, point, visible_pmfs, p_det,
                         class_prior, occluded, config: SemanticFilterConfig, n_particles: int):
    """Tempered log-likelihood per particle from association arrays.

    ``visible_pmfs`` is indexed by ``point``; ``p_det`` is ``(N, L)``.
    Returns ``(loglik (N,), n_assigned (N,))``.
    """
    lab = labels_flat[pixel].astype(np.int64)
    pd = p_det[particle, point]
    pv = visible_pmfs[point, lab]
    term = np.log(pv * pd + occluded[lab] * (1.0 - pd)) - np.log(class_prior[lab])
    total = np.bincount(particle, weights=term, minlength=n_particles)
    n_assigned = np.bincount(particle, minlength=n_particles)
    return total * tempering_exponent(n_assigned, config.scale, config.cutoff), n_assigned


def image_log_likelihood(image: SegmentedImage, association: Association, smap: SemanticMap,
                         config: SemanticFilterConfig, observer_position) -> float:
    """Tempered log-likelihood of one image for one pose.

    ``association.points`` index into ``smap``; ``observer_position`` is the
    vehicle position used for the wedge test.
    """
    if association.n_assigned == 0:
        return 0.0
    idx = association.points
    pmfs = smap.visible_pmfs(config.pmf_floor, idx)
    vis = smap.wedge_mask(np.asarray(observer_position, dtype=float)[None], idx)
    p_det = detection_probability(vis, smap.rho[idx], config.occlusion_prob)
    prior = floored_pmf(smap.class_prior, config.pmf_floor)
    occ = floored_pmf(smap.occluded, config.pmf_floor)
    part = np.zeros(idx.size, dtype=np.int64)
    ll, _ = batch_log_likelihood(image.labels.ravel(), part, association.pixels, np.arange(idx.size),
                                 pmfs, p_det, prior, occ, config, 1)
    return float(ll[0])


@dataclass
class StepInfo:
    ess: float
    n_assigned_mean: float
    resampled: bool
    degenerate_resets: int


class SemanticFilter:
    """Particle filter state plus the static models it evaluates against."""

    def __init__(self, smap: SemanticMap, cameras, config: SemanticFilterConfig | None = None, rng=None):
        if smap.is_dense:
            raise ValueError("the semantic filter needs a semantic-descriptor map")
        self.map = smap
        self.cameras = {c.camera_id: c for c in cameras}
        self.config = config or SemanticFilterConfig()
        self.rng = rng if rng is not None else np.random.default_rng()
        self.pmfs = smap.visible_pmfs(self.config.pmf_floor)
        self.prior = floored_pmf(smap.class_prior, self.config.pmf_floor)
        self.occluded = floored_pmf(smap.occluded, self.config.pmf_floor)
        self.particles: ParticleSet | None = None
        self.degenerate_resets = 0
        self.steps = 0

    def initialize(self, pose: Pose, std, seed=None):
        self.particles = ParticleSet.around(pose, std, self.config.num_particles, self.rng, seed)

    def measurement_update(self, ps: ParticleSet, image: SegmentedImage):
        """Add one image's tempered log-likelihood to every particle."""
        camera = self.cameras[image.camera_id]
        centre = ps.weights @ ps.t if np.any(np.isfinite(ps.logw)) else ps.t.mean(axis=0)
        local = potentially_visible_set(self.map, centre)
        if local.size == 0:
            return ps, np.zeros(len(ps), dtype=np.int64)
        vis = self.map.wedge_mask(ps.t, local)
        p_det = detection_probability(vis, self.map.rho[local][None, :], self.config.occlusion_prob)
        part, pix, pt, _ = associate_batch(camera, ps.R, ps.t, self.map.positions[local],
                                           (image.height, image.width))
        ll, n_assigned = batch_log_likelihood(image.labels.ravel(), part, pix, pt, self.pmfs[local],
                                              p_det, self.prior, self.occluded, self.config, len(ps))
        return ParticleSet(ps.R, ps.t, ps.logw + ll, ps.seed), n_assigned

    def step(self, odo: OdometryReading, images) -> StepInfo:
        ps = self.particles
        R, t, _ = propagate_mixture_batch(ps.R, ps.t, odo, self.config.motion, self.map.road, self.rng)
        self.steps += 1
        if self.steps % RENORMALIZE_EVERY == 0:
            R = nearest_rotation(R)
        ps = ParticleSet(R, t, ps.logw, ps.seed)
        counts = []
        for image in images:
            ps, n_assigned = self.measurement_update(ps, image)
            counts.append(n_assigned.mean())
        ps, resampled = self._normalize_and_resample(ps)
        self.particles = ps
        return StepInfo(ps.ess(), float(np.mean(counts)) if counts else 0.0, resampled,
                        self.degenerate_resets)

    def _normalize_and_resample(self, ps: ParticleSet):
        n = len(ps)
        if not np.any(np.isfinite(ps.logw)):
            self.degenerate_resets += 1
            log.warning("degenerate particle weights; resetting to uniform")
            return ParticleSet(ps.R, ps.t, np.full(n, -np.log(n)), ps.seed), False
        logw = np.where(np.isfinite(ps.logw), ps.logw, -np.inf)
        ps = ParticleSet(ps.R, ps.t, logw - logsumexp(logw), ps.seed)
        if ps.ess() < self.config.resample_threshold * n:
            idx = systematic_resample(ps.weights, self.rng)
            return ParticleSet(ps.R[idx], ps.t[idx], np.full(n, -np.log(n)), ps.seed), True
        return ps, False

    def estimate(self) -> PoseEstimate:
        return estimate(self.particles)


def step(filter_state: ParticleSet, odo, images, smap: SemanticMap, cameras, config: SemanticFilterConfig, rng):
    """Functional form of :meth:`SemanticFilter.step`; returns the new set."""
    f = SemanticFilter(smap, cameras, config, rng)
    f.particles = filter_state
    info = f.step(odo, images)
    return f.particles, info
