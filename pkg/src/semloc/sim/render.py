"""Ray-cast label rendering, segmentation noise and sparse feature synthesis."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import CameraModel, Pose, in_wedge_arrays, project
from ..semantic_filter import SegmentedImage
from ..sift_filter import SparseFeatureSet
from .world import CLASS_ID, SPLAT, World

SKY = CLASS_ID["sky"]
CAR = CLASS_ID["car"]


@dataclass
class SegmenterNoiseModel:
    """Label confusion applied in square blocks of ``blob_correlation_px`` pixels.

    Every pixel of a block shares one uniform draw, so errors come in
    spatially correlated blobs rather than salt-and-pepper.
    """

    confusion: np.ndarray
    blob_correlation_px: int = 8

    def __post_init__(self):
        self.confusion = np.asarray(self.confusion, dtype=float)
        C = self.confusion
        if C.ndim != 2 or C.shape[0] != C.shape[1]:
            raise ValueError("confusion matrix must be square")
        if (C < 0).any() or not np.allclose(C.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("confusion rows must be nonnegative and sum to one")
        if self.blob_correlation_px < 1:
            raise ValueError("blob size must be at least one pixel")
        cum = np.cumsum(C, axis=1)
        cum[:, -1] = 1.0
        self._cum = cum

    def apply(self, labels, rng):
        H, W = labels.shape
        b = self.blob_correlation_px
        u = rng.random(((H + b - 1) // b, (W + b - 1) // b))
        u = np.repeat(np.repeat(u, b, axis=0), b, axis=1)[:H, :W]
        return (self._cum[labels] > u[..., None]).argmax(axis=-1).astype(np.uint8)


def make_confusion(n_classes, error, present, overrides=None):
    """Row-stochastic confusion matrix.

    ``error`` is spread uniformly over the other ``present`` classes;
    ``overrides`` maps ``(true, predicted)`` names to extra probability mass.
    """
    C = np.eye(n_classes)
    present = [CLASS_ID[p] if isinstance(p, str) else int(p) for p in present]
    for i in present:
        others = [j for j in present if j != i]
        C[i, i] = 1.0 - error
        C[i, others] += error / len(others)
    for (a, b), p in (overrides or {}).items():
        ia, ib = CLASS_ID[a], CLASS_ID[b]
        C[ia, ib] += p
        C[ia, ia] -= p
    if (C < -1e-12).any():
        raise ValueError("override mass exceeds the diagonal")
    return np.clip(C, 0.0, None)


@dataclass
class ConditionModel:
    """Appearance of one traversal (a season or time of day)."""

    name: str
    noise: SegmenterNoiseModel
    descriptor_shift: float = 20.0    # per-landmark appearance change (descriptor units)
    descriptor_noise: float = 8.0     # per-detection noise
    appearance_change: float = 0.0    # fraction of landmarks whose appearance is redrawn
    dropout: float = 0.1
    pixel_noise_px: float = 1.0
    clutter: int = 15
    car_rate: float = 1.0
    heavy: bool = False


PRESENT = ("road", "sidewalk", "building", "pole", "traffic sign", "vegetation",
           "terrain", "sky", "car")


def default_conditions(n_classes=19):
    """A mapping condition followed by eleven localization conditions.

    The last block ("winter") replaces ground and vegetation labels heavily
    and changes feature appearance strongly.
    """
    def cond(name, err, shift, dropout, change=0.0, overrides=None, blob=8, heavy=False, clutter=15):
        return ConditionModel(name, SegmenterNoiseModel(make_confusion(n_classes, err, PRESENT, overrides), blob),
                              descriptor_shift=shift, dropout=dropout, appearance_change=change,
                              heavy=heavy, clutter=clutter)

    snow = {("terrain", "road"): 0.4, ("terrain", "sidewalk"): 0.15, ("sidewalk", "road"): 0.35,
            ("vegetation", "terrain"): 0.35, ("vegetation", "building"): 0.1,
            ("road", "terrain"): 0.15, ("pole", "building"): 0.15, ("traffic sign", "building"): 0.15}
    mild = [("sep", 0.03, 0.0, 0.1, 0.0), ("oct-a", 0.04, 12.0, 0.1, 0.1), ("oct-b", 0.05, 15.0, 0.15, 0.15),
            ("nov-a", 0.05, 18.0, 0.15, 0.2), ("nov-b", 0.06, 20.0, 0.2, 0.25), ("mar", 0.06, 25.0, 0.2, 0.3),
            ("apr", 0.05, 20.0, 0.15, 0.2), ("may", 0.04, 15.0, 0.1, 0.15), ("jun", 0.05, 22.0, 0.15, 0.2),
            ("jul", 0.06, 25.0, 0.2, 0.25), ("aug", 0.05, 18.0, 0.15, 0.2)]
    out = [cond(*m) for m in mild]
    out.append(cond("winter", 0.12, 40.0, 0.45, 0.9, snow, blob=16, heavy=True, clutter=40))
    return out


class Renderer:
    """Ray caster for one camera; rays are cached per camera."""

    def __init__(self, world: World, camera: CameraModel, max_range: float = 150.0):
        self.world = world
        self.camera = camera
        self.max_range = max_range
        H, W = camera.height, camera.width
        v, u = np.mgrid[0:H, 0:W].astype(float)
        xy = camera.undistort(camera.from_pixels(np.column_stack([u.ravel(), v.ravel()])))
        self.rays = np.column_stack([xy, np.ones(len(xy))])   # camera frame, unit depth
        cfg = world.config
        self.splat_scale = cfg.splat_px_at_10m * 10.0
        self.splat_idx = np.flatnonzero(world.draw_kind == SPLAT)

    def _pose_rays(self, pose: Pose):
        T = pose @ self.camera.extrinsic
        return T.translation, self.rays @ T.rotation.T

    def render_truth(self, pose: Pose, extra_facades=None):
        """Noise-free labels ``(H, W)`` and per-pixel depth along the optical axis."""
        cam = self.camera
        H, W = cam.height, cam.width
        o, D = self._pose_rays(pose)
        depth = np.full(H * W, np.inf)
        label = np.full(H * W, SKY, dtype=np.uint8)
        # ground plane
        down = D[:, 2] < -1e-9
        tg = np.where(down, -o[2] / np.where(down, D[:, 2], -1.0), np.inf)
        hit = down & (tg < self.max_range)
        if hit.any():
            xy = o[:2] + tg[hit, None] * D[hit, :2]
            label[hit] = self.world.ground_label(xy)
            depth[hit] = tg[hit]
        depth = depth.reshape(H, W)
        label = label.reshape(H, W)
        w = self.world
        fa, fb, fh, fc = w.facade_a, w.facade_b, w.facade_height, w.facade_class
        if extra_facades is not None:
            ea, eb, eh, ec = extra_facades
            fa, fb = np.vstack([fa, ea]), np.vstack([fb, eb])
            fh, fc = np.concatenate([fh, eh]), np.concatenate([fc, ec])
        if len(fa):
            D3 = D.reshape(H, W, 3)
            for a, b, h, c, u1, u2 in zip(fa, fb, fh, fc, *self._facade_columns(pose, fa, fb, fh)):
                if u1 < u2:
                    self._facade(o, D3[:, u1:u2], a, b, h, c, depth[:, u1:u2], label[:, u1:u2])
        if len(self.splat_idx):
            self._splats(pose, depth, label)
        return label, depth

    def _facade_columns(self, pose, fa, fb, fh):
        """Image column range each facade piece can cover (empty if culled)."""
        W = self.camera.width
        n = len(fa)
        corners = np.empty((n, 4, 3))
        corners[:, 0, :2] = corners[:, 1, :2] = fa
        corners[:, 2, :2] = corners[:, 3, :2] = fb
        corners[:, 0::2, 2] = 0.0
        corners[:, 1::2, 2] = fh[:, None]
        T = pose @ self.camera.extrinsic
        pc = (corners.reshape(-1, 3) - T.translation) @ T.rotation
        pc = pc.reshape(n, 4, 3)
        z = pc[..., 2]
        dist = np.minimum(np.hypot(*(fa - T.translation[:2]).T), np.hypot(*(fb - T.translation[:2]).T))
        front = z > 1e-3
        visible = front.any(axis=1) & (dist < self.max_range)
        # a piece straddling the image plane may cover any column; otherwise
        # the undistorted corner projections bound it (distortion kept mild)
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.camera.fx * pc[..., 0] / z + self.camera.cx
        margin = 2 + 0.02 * W
        lo = np.where(front.all(axis=1), np.floor(u.min(axis=1) - margin), 0)
        hi = np.where(front.all(axis=1), np.ceil(u.max(axis=1) + margin) + 1, W)
        lo = np.clip(np.nan_to_num(lo), 0, W).astype(np.int64)
        hi = np.clip(np.nan_to_num(hi), 0, W).astype(np.int64)
        hi[~visible] = 0
        return lo, hi

    def _facade(self, o, D, a, b, h, c, depth, label):
        """Intersect rays ``D`` (any shape ``(..., 3)``) with one vertical quad."""
        ex, ey = b - a
        Dx, Dy, Dz = D[..., 0], D[..., 1], D[..., 2]
        den = Dy * ex - Dx * ey
        ax, ay = a[0] - o[0], a[1] - o[1]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (ay * ex - ax * ey) / den
            s = (Dx * ay - Dy * ax) / den
        z = o[2] + t * Dz
        hit = (np.abs(den) > 1e-12) & (t > 0) & (s >= 0) & (s <= 1) & (z >= 0) & (z <= h) & (t < depth)
        depth[hit] = t[hit]
        label[hit] = c

    def _splats(self, pose, depth, label):
        w = self.world
        idx = self.splat_idx
        uv, d = project(self.camera, pose, w.positions[idx])
        px = self.camera.to_pixels(uv)
        H, W = depth.shape
        ok = np.isfinite(px[:, 0]) & (d > 0.5) & (d < self.max_range)
        with np.errstate(invalid="ignore"):
            ok &= (px[:, 0] > -20) & (px[:, 0] < W + 20) & (px[:, 1] > -20) & (px[:, 1] < H + 20)
        order = np.flatnonzero(ok)
        order = order[np.argsort(-d[order], kind="stable")]
        for k in order:
            r = int(round(0.5 * self.splat_scale / d[k]))
            u0, v0 = int(np.floor(px[k, 0] + 0.5)), int(np.floor(px[k, 1] + 0.5))
            u1, u2 = max(u0 - r, 0), min(u0 + r + 1, W)
            v1, v2 = max(v0 - r, 0), min(v0 + r + 1, H)
            if u1 >= u2 or v1 >= v2:
                continue
            block = depth[v1:v2, u1:u2]
            front = block > d[k]
            block[front] = d[k]
            label[v1:v2, u1:u2][front] = w.classes[idx[k]]


def renderer_for(world: World, camera: CameraModel) -> Renderer:
    """Cached :class:`Renderer` (ray tables are reused across frames)."""
    cache = world.__dict__.setdefault("_renderers", {})
    hit = cache.get(id(camera))
    if hit is None or hit.camera is not camera:
        hit = cache[id(camera)] = Renderer(world, camera)
    return hit


def random_cars(world: World, pose: Pose, rng, rate: float):
    """Cars on the road ahead of ``pose`` as facade pieces (four sides each)."""
    n = rng.poisson(rate) if rate > 0 else 0
    if n == 0:
        return None
    route = world.route
    _, i = route.tree.query(pose.translation[:2])
    s = route.s[i] + rng.uniform(8.0, 50.0, n)
    p, tan, nrm = route.at(s)
    c = p + rng.uniform(-3.0, 3.0, n)[:, None] * nrm
    half_l, half_w = 2.25, 0.9
    a, b = [], []
    for sgn in (-1.0, 1.0):
        a.append(c + sgn * half_w * nrm - half_l * tan)
        b.append(c + sgn * half_w * nrm + half_l * tan)
        a.append(c + sgn * half_l * tan - half_w * nrm)
        b.append(c + sgn * half_l * tan + half_w * nrm)
    a, b = np.vstack(a), np.vstack(b)
    return a, b, np.full(len(a), 1.5), np.full(len(a), CAR, dtype=np.int64)


def render_segmented(pose: Pose, camera: CameraModel, world: World, noise: SegmenterNoiseModel | None,
                     rng, t=0.0, cars=None) -> SegmentedImage:
    """Label image: nearest surface or splat per pixel, then confusion noise.

    ``noise=None`` returns the geometric labeling. ``cars`` are extra
    facade pieces from :func:`random_cars`, shared between the cameras of
    one frame.
    """
    lab, _ = renderer_for(world, camera).render_truth(pose, cars)
    if noise is not None:
        lab = noise.apply(lab, rng)
    return SegmentedImage(lab, camera.camera_id, t)


def unoccluded(world: World, camera: CameraModel, pose: Pose, depth, tol=0.05):
    """Landmarks projecting into the image that no nearer surface hides.

    Returns ``(indices, pixel coordinates, depth)``.
    """
    uv, d = project(camera, pose, world.positions)
    px = camera.to_pixels(uv)
    H, W = depth.shape
    u = np.floor(np.nan_to_num(px[:, 0], nan=-1.0) + 0.5).astype(np.int64)
    v = np.floor(np.nan_to_num(px[:, 1], nan=-1.0) + 0.5).astype(np.int64)
    ok = (d > 0) & (u >= 0) & (u < W) & (v >= 0) & (v < H)
    idx = np.flatnonzero(ok)
    front = d[idx] <= depth[v[idx], u[idx]] * (1.0 + tol) + 0.3
    idx = idx[front]
    return idx, px[idx], d[idx]


def condition_appearance(world: World, condition: ConditionModel, rng):
    """Per-landmark descriptors for this condition.

    A fraction ``appearance_change`` of landmarks gets an unrelated
    descriptor; the rest keep the base one plus a persistent Gaussian shift.
    """
    app = world.appearance + rng.normal(0.0, condition.descriptor_shift, world.appearance.shape)
    changed = rng.random(len(app)) < condition.appearance_change
    app[changed] = rng.uniform(0.0, 255.0, (int(changed.sum()), app.shape[1]))
    return app


def render_sparse(pose: Pose, camera: CameraModel, world: World, condition: ConditionModel, rng,
                  appearance=None, t=0.0, candidates=None, with_tracks=False) -> SparseFeatureSet:
    """Sparse features: detected landmarks plus uniformly scattered clutter.

    A landmark inside its visibility wedge and inside the image is detected
    with probability ``rho * (1 - dropout)``. ``candidates`` optionally
    restricts the landmarks considered (e.g. to unoccluded ones). Feature
    coordinates are distorted normalized coordinates.
    """
    appearance = world.appearance if appearance is None else appearance
    T = pose @ camera.extrinsic
    cand = np.arange(world.n_landmarks) if candidates is None else np.asarray(candidates, dtype=np.int64)
    inw = in_wedge_arrays(T.translation[None, :2], world.positions[cand, :2],
                          world.gamma_a[cand], world.span[cand], world.wedge_range[cand])[0]
    cand = cand[inw]
    uv, d = project(camera, pose, world.positions[cand])
    px = camera.to_pixels(uv)
    W, H = camera.width, camera.height
    with np.errstate(invalid="ignore"):
        ok = (d > 0) & (px[:, 0] >= 0) & (px[:, 0] <= W - 1) & (px[:, 1] >= 0) & (px[:, 1] <= H - 1)
    cand, px = cand[ok], px[ok]
    det = rng.random(len(cand)) < world.rho[cand] * (1.0 - condition.dropout)
    cand, px = cand[det], px[det]
    if condition.pixel_noise_px > 0:
        px = px + rng.normal(0.0, condition.pixel_noise_px, px.shape)
    dim = appearance.shape[1]
    desc = appearance[cand]
    if condition.descriptor_noise > 0:
        desc = desc + rng.normal(0.0, condition.descriptor_noise, desc.shape)
    n_clutter = rng.poisson(condition.clutter) if condition.clutter > 0 else 0
    cpx = rng.uniform([0, 0], [W - 1, H - 1], size=(n_clutter, 2))
    cdesc = rng.uniform(0.0, 255.0, size=(n_clutter, dim))
    px = np.vstack([px, cpx])
    descs = np.clip(np.rint(np.vstack([desc, cdesc])), 0, 255).astype(np.uint8)
    tracks = np.concatenate([cand, np.full(n_clutter, -1)]).astype(np.int64)
    inside = (px[:, 0] >= 0) & (px[:, 0] <= W - 1) & (px[:, 1] >= 0) & (px[:, 1] <= H - 1)
    return SparseFeatureSet(camera.from_pixels(px[inside]), descs[inside], camera.camera_id, t,
                            tracks[inside] if with_tracks else None)
