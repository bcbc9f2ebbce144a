"""Synthetic street worlds: route, facades, landmarks, drives and cameras.

A world is flat ground (z = 0) with a road corridor along a route, vertical
facade pieces (building walls), and point landmarks of several classes.
Landmarks on facades or on the ground are drawn by those surfaces; the
rest (vegetation, poles, signs) are drawn as splats by the renderer.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields

import numpy as np
from scipy.spatial import cKDTree

from ..geometry import CameraModel, Pose, camera_mount, wrap_angle
from ..semantic_map import CITYSCAPES_CLASSES

CLASS_ID = {name: i for i, name in enumerate(CITYSCAPES_CLASSES)}

SURFACE, GROUND, SPLAT = 0, 1, 2

# lateral offset range (m, from the road centre), height range (m), how it is drawn
CLASS_PROFILES = {
    "building": ((None, None), (0.5, None), SURFACE),
    "vegetation": ((6.5, 8.8), (0.8, 6.0), SPLAT),
    "pole": ((5.6, 6.2), (0.8, 6.0), SPLAT),
    "traffic sign": ((5.6, 6.2), (2.0, 3.2), SPLAT),
    "terrain": ((6.0, 12.0), (0.0, 0.0), GROUND),
    "road": ((-3.5, 3.5), (0.0, 0.0), GROUND),
}


@dataclass
class WorldConfig:
    """Parameters of a synthetic world; every field maps to an INI key.

    ``landmark_density`` is points per meter of route (both sides
    together) for each class.
    """

    route: str = "loop"           # loop | straight | wave
    route_length: float = 480.0
    kind: str = "textured"        # textured | wall
    road_half_width: float = 4.0
    sidewalk_width: float = 1.5
    landmark_density: dict = field(default_factory=lambda: {
        "building": 3.0, "vegetation": 1.5, "pole": 0.4, "traffic sign": 0.1,
        "terrain": 0.8, "road": 0.3})
    building_prob: float = 0.6
    block_length: tuple = (15.0, 40.0)
    gap_length: tuple = (6.0, 20.0)
    facade_offset: tuple = (9.0, 13.0)
    facade_height: tuple = (6.0, 14.0)
    wall_offset: float = 8.0
    wall_height: float = 12.0
    wall_period: float = 60.0
    wall_patch: float = 12.0
    wall_patch_gain: float = 5.0
    wedge_half_angle_deg: tuple = (40.0, 80.0)
    wedge_range: tuple = (30.0, 60.0)
    rho: tuple = (0.6, 0.95)
    speed: float = 8.0
    dt: float = 0.2
    lateral_wander: float = 0.6
    image_width: int = 192
    image_height: int = 144
    focal: float = 130.0
    camera_yaw_deg: float = 40.0
    lever_arm: float = 0.5
    mount_height: float = 1.6
    n_cameras: int = 2
    splat_px_at_10m: float = 7.0
    map_max_depth: float = 25.0
    map_position_noise: float = 0.03
    seed: int = 0

    def __post_init__(self):
        if not self.route_length > 0:
            raise ValueError("route length must be positive")
        if any(v < 0 for v in self.landmark_density.values()):
            raise ValueError("landmark densities must be nonnegative")
        unknown = set(self.landmark_density) - set(CLASS_PROFILES)
        if unknown:
            raise ValueError(f"no placement profile for classes {sorted(unknown)}")

    # INI round trip ----------------------------------------------------------

    @classmethod
    def from_ini(cls, text: str, section: str = "world") -> "WorldConfig":
        cp = configparser.ConfigParser()
        cp.read_string(text)
        if not cp.has_section(section):
            raise ValueError(f"missing [{section}] section")
        kw = {}
        defaults = cls()
        for f in fields(cls):
            key = f.name
            if f.name == "landmark_density":
                dens = dict(defaults.landmark_density)
                for k, v in cp.items(section):
                    if k.startswith("density."):
                        dens[k[len("density."):].replace("_", " ")] = float(v)
                kw[key] = dens
                continue
            if not cp.has_option(section, key):
                continue
            raw = cp.get(section, key)
            current = getattr(defaults, key)
            if isinstance(current, bool):
                kw[key] = cp.getboolean(section, key)
            elif isinstance(current, int):
                kw[key] = int(raw)
            elif isinstance(current, float):
                kw[key] = float(raw)
            elif isinstance(current, tuple):
                kw[key] = tuple(float(x) for x in raw.split(","))
            else:
                kw[key] = raw.strip()
        return cls(**kw)

    def to_ini(self, section: str = "world") -> str:
        lines = [f"[{section}]"]
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "landmark_density":
                for k in sorted(v):
                    lines.append(f"density.{k.replace(' ', '_')} = {v[k]!r}")
            elif isinstance(v, tuple):
                lines.append(f"{f.name} = " + ", ".join(repr(float(x)) for x in v))
            else:
                lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


def route_polyline(cfg: WorldConfig, spacing: float = 0.5):
    """Dense route samples ``(S, 2)`` and whether the route is a closed loop."""
    L = cfg.route_length
    n = max(int(np.ceil(L / spacing)), 2)
    s = np.linspace(0.0, L, n + 1)
    if cfg.route == "straight":
        return np.column_stack([s, np.zeros_like(s)]), False
    if cfg.route == "wave":
        amp, lam = 15.0, 160.0
        # sample x then reparametrize approximately by arc length
        x = np.linspace(0.0, L, 8 * n + 1)
        y = amp * np.sin(2 * np.pi * x / lam)
        arc = np.concatenate([[0.0], np.cumsum(np.hypot(np.diff(x), np.diff(y)))])
        t = np.linspace(0.0, arc[-1], n + 1)
        return np.column_stack([np.interp(t, arc, x), np.interp(t, arc, y)]), False
    if cfg.route == "loop":
        return _rounded_rectangle(L, spacing), True
    raise ValueError(f"unknown route preset {cfg.route!r}")


def _rounded_rectangle(perimeter, spacing, radius=20.0):
    """Counter-clockwise loop starting at the origin heading +x; long sides twice the short."""
    straight = perimeter - 2 * np.pi * radius
    if straight <= 0:
        raise ValueError("route too short for the loop preset")
    long_, short = straight / 3.0, straight / 6.0
    n_arc = max(int(np.ceil(0.5 * np.pi * radius / spacing)), 2)
    pts = []
    p = np.zeros(2)
    heading = 0.0
    for length in (long_, short, long_, short):
        d = np.array([np.cos(heading), np.sin(heading)])
        m = max(int(np.ceil(length / spacing)), 1)
        pts.extend(p + (k / m) * length * d for k in range(m))
        p = p + length * d
        centre = p + radius * np.array([-d[1], d[0]])
        phi = heading - np.pi / 2 + np.arange(n_arc) * (0.5 * np.pi / n_arc)
        pts.extend(centre + radius * np.column_stack([np.cos(phi), np.sin(phi)]))
        heading += np.pi / 2
        p = centre + radius * np.array([np.cos(heading - np.pi / 2), np.sin(heading - np.pi / 2)])
    pts.append(pts[0])
    return np.array(pts)


@dataclass
class Route:
    """Arc-length parametrized centreline with unit tangents and left normals."""

    xy: np.ndarray
    closed: bool

    def __post_init__(self):
        self.xy = np.asarray(self.xy, dtype=float)
        seg = np.hypot(*np.diff(self.xy, axis=0).T)
        self.s = np.concatenate([[0.0], np.cumsum(seg)])
        self.length = float(self.s[-1])
        self.tree = cKDTree(self.xy)

    def at(self, s):
        """Position, unit tangent and left normal at arc length ``s``."""
        s = np.asarray(s, dtype=float)
        s = np.mod(s, self.length) if self.closed else np.clip(s, 0.0, self.length)
        x = np.interp(s, self.s, self.xy[:, 0])
        y = np.interp(s, self.s, self.xy[:, 1])
        h = 0.5
        s0 = s - h
        s1 = s + h
        if self.closed:
            s0, s1 = np.mod(s0, self.length), np.mod(s1, self.length)
        else:
            s0, s1 = np.clip(s0, 0.0, self.length), np.clip(s1, 0.0, self.length)
        tx = np.interp(s1, self.s, self.xy[:, 0]) - np.interp(s0, self.s, self.xy[:, 0])
        ty = np.interp(s1, self.s, self.xy[:, 1]) - np.interp(s0, self.s, self.xy[:, 1])
        nrm = np.hypot(tx, ty)
        tangent = np.stack([tx / nrm, ty / nrm], axis=-1)
        normal = np.stack([-tangent[..., 1], tangent[..., 0]], axis=-1)
        return np.stack([x, y], axis=-1), tangent, normal

    def lateral_distance(self, xy):
        """Approximate horizontal distance to the centreline."""
        d, _ = self.tree.query(np.asarray(xy, dtype=float).reshape(-1, 2))
        return d


@dataclass
class World:
    config: WorldConfig
    class_table: tuple
    route: Route
    facade_a: np.ndarray        # (F, 2)
    facade_b: np.ndarray        # (F, 2)
    facade_height: np.ndarray   # (F,)
    facade_class: np.ndarray    # (F,)
    positions: np.ndarray       # (L, 3)
    classes: np.ndarray         # (L,)
    draw_kind: np.ndarray       # (L,)
    rho: np.ndarray
    gamma_a: np.ndarray
    span: np.ndarray
    wedge_range: np.ndarray
    appearance: np.ndarray      # (L, 128) base descriptors
    cameras: list

    @property
    def n_landmarks(self) -> int:
        return len(self.positions)

    def ground_label(self, xy):
        d = self.route.lateral_distance(xy)
        cfg = self.config
        out = np.full(d.shape, CLASS_ID["terrain"], dtype=np.uint8)
        out[d <= cfg.road_half_width + cfg.sidewalk_width] = CLASS_ID["sidewalk"]
        out[d <= cfg.road_half_width] = CLASS_ID["road"]
        return out

    def to_arrays(self) -> dict:
        c = self.config
        return dict(
            world_ini=np.array(c.to_ini()),
            route_xy=self.route.xy, route_closed=np.array(self.route.closed),
            facade_a=self.facade_a, facade_b=self.facade_b,
            facade_height=self.facade_height, facade_class=self.facade_class,
            positions=self.positions, classes=self.classes, draw_kind=self.draw_kind,
            rho=self.rho, gamma_a=self.gamma_a, span=self.span, wedge_range=self.wedge_range,
            appearance=self.appearance,
        )

    @classmethod
    def from_arrays(cls, arrs) -> "World":
        cfg = WorldConfig.from_ini(str(arrs["world_ini"]))
        return cls(cfg, CITYSCAPES_CLASSES, Route(arrs["route_xy"], bool(arrs["route_closed"])),
                   arrs["facade_a"], arrs["facade_b"], arrs["facade_height"], arrs["facade_class"],
                   arrs["positions"], arrs["classes"], arrs["draw_kind"], arrs["rho"], arrs["gamma_a"],
                   arrs["span"], arrs["wedge_range"], arrs["appearance"], make_cameras(cfg))


def make_cameras(cfg: WorldConfig) -> list:
    cams = []
    if cfg.n_cameras == 1:
        mounts = [(0.0, 0.0)]
    else:
        mounts = [(cfg.lever_arm, np.radians(cfg.camera_yaw_deg)), (-cfg.lever_arm, -np.radians(cfg.camera_yaw_deg))]
    for cid, (lat, yaw) in enumerate(mounts[:max(cfg.n_cameras, 1)]):
        cams.append(CameraModel.simple(cfg.image_width, cfg.image_height, cfg.focal,
                                       extrinsic=camera_mount(lateral=lat, yaw=yaw), camera_id=cid))
    return cams


def _facade_pieces(route: Route, s0, s1, side, offset, height, piece=4.0):
    n = max(int(np.ceil((s1 - s0) / piece)), 1)
    s = np.linspace(s0, s1, n + 1)
    p, _, nrm = route.at(s)
    pts = p + side * offset * nrm
    return pts[:-1], pts[1:], np.full(n, height)


def _sample_on_facades(rng, a, b, h, count):
    if count == 0 or len(a) == 0:
        return np.zeros((0, 3))
    lengths = np.hypot(*(b - a).T)
    pick = rng.choice(len(a), size=count, p=lengths / lengths.sum())
    u = rng.random(count)
    xy = a[pick] + u[:, None] * (b[pick] - a[pick])
    z = rng.uniform(0.5, np.maximum(h[pick] - 0.5, 0.6))
    return np.column_stack([xy, z])


def _wedges_towards_route(rng, route: Route, pos, cfg: WorldConfig):
    _, idx = route.tree.query(pos[:, :2])
    target = route.xy[idx]
    centre = np.arctan2(target[:, 1] - pos[:, 1], target[:, 0] - pos[:, 0])
    half = np.radians(rng.uniform(*cfg.wedge_half_angle_deg, size=len(pos)))
    rng_ = rng.uniform(*cfg.wedge_range, size=len(pos))
    rho = rng.uniform(*cfg.rho, size=len(pos))
    return rho, wrap_angle(centre - half), 2 * half, rng_


def generate_geometry(cfg: WorldConfig, rng) -> World:
    """Place facades and landmarks along the route."""
    xy, closed = route_polyline(cfg)
    route = Route(xy, closed)
    L = route.length
    fa, fb, fh, fc = [], [], [], []
    pos_chunks, cls_chunks = [], []

    def add(points, name):
        if len(points):
            pos_chunks.append(points)
            cls_chunks.append(np.full(len(points), CLASS_ID[name]))

    dens = cfg.landmark_density
    if cfg.kind == "wall":
        a, b, h = _facade_pieces(route, 0.0, L, +1, cfg.wall_offset, cfg.wall_height)
        fa.append(a), fb.append(b), fh.append(h), fc.append(np.full(len(a), CLASS_ID["building"]))
        # wall points are denser inside periodic patches
        n = rng.poisson(dens.get("building", 0.0) * L)
        s = rng.uniform(0.0, L, size=4 * n + 1)
        in_patch = np.mod(s, cfg.wall_period) < cfg.wall_patch
        accept = rng.random(s.size) < np.where(in_patch, 1.0, 1.0 / cfg.wall_patch_gain)
        s = s[accept][:n]
        p, _, nrm = route.at(s)
        xy_w = p + (cfg.wall_offset - 0.01) * nrm
        add(np.column_stack([xy_w, rng.uniform(0.5, cfg.wall_height - 0.5, size=len(s))]), "building")
        nt = rng.poisson(dens.get("terrain", 0.0) * L)
        st = rng.uniform(0.0, L, nt)
        p, _, nrm = route.at(st)
        lat = -rng.uniform(*CLASS_PROFILES["terrain"][0], size=nt)
        add(np.column_stack([p + lat[:, None] * nrm, np.zeros(nt)]), "terrain")
    else:
        for side in (+1, -1):
            s = 0.0
            while s < L:
                if rng.random() < cfg.building_prob:
                    ln = rng.uniform(*cfg.block_length)
                    off = rng.uniform(*cfg.facade_offset)
                    a, b, h = _facade_pieces(route, s, min(s + ln, L), side, off, rng.uniform(*cfg.facade_height))
                    fa.append(a), fb.append(b), fh.append(h)
                    fc.append(np.full(len(a), CLASS_ID["building"]))
                    s += ln
                else:
                    s += rng.uniform(*cfg.gap_length)
        a = np.concatenate(fa) if fa else np.zeros((0, 2))
        b = np.concatenate(fb) if fb else np.zeros((0, 2))
        h = np.concatenate(fh) if fh else np.zeros(0)
        if len(a):
            add(_sample_on_facades(rng, a, b, h, rng.poisson(dens.get("building", 0.0) * L)), "building")
        for name, ((lo, hi), (zlo, zhi), _kind) in CLASS_PROFILES.items():
            if name == "building":
                continue
            n = rng.poisson(dens.get(name, 0.0) * L)
            if n == 0:
                continue
            s = rng.uniform(0.0, L, n)
            p, _, nrm = route.at(s)
            side = np.where(rng.random(n) < 0.5, 1.0, -1.0) if lo >= 0 else np.ones(n)
            lat = side * rng.uniform(lo, hi, n)
            z = rng.uniform(zlo, zhi, n) if zhi > zlo else np.full(n, zlo)
            add(np.column_stack([p + lat[:, None] * nrm, z]), name)
    positions = np.concatenate(pos_chunks) if pos_chunks else np.zeros((0, 3))
    classes = np.concatenate(cls_chunks).astype(np.int64) if cls_chunks else np.zeros(0, dtype=np.int64)
    kind_of = {CLASS_ID[k]: v[2] for k, v in CLASS_PROFILES.items()}
    draw = np.array([kind_of[int(c)] for c in classes], dtype=np.int64)
    rho, ga, span, rng_ = _wedges_towards_route(rng, route, positions, cfg)
    appearance = rng.uniform(0.0, 255.0, size=(len(positions), 128))
    return World(cfg, CITYSCAPES_CLASSES, route,
                 np.concatenate(fa) if fa else np.zeros((0, 2)),
                 np.concatenate(fb) if fb else np.zeros((0, 2)),
                 np.concatenate(fh) if fh else np.zeros(0),
                 np.concatenate(fc).astype(np.int64) if fc else np.zeros(0, dtype=np.int64),
                 positions, classes, draw, rho, ga, span, rng_, appearance, make_cameras(cfg))


@dataclass
class Drive:
    times: np.ndarray
    poses: list

    def states(self) -> np.ndarray:
        return np.array([p.to_state() for p in self.poses])


def generate_drive(world: World, rng, n_steps: int | None = None, wander: float | None = None,
                   start_s: float = 0.0) -> Drive:
    """Ground-truth drive along the route with smooth lateral wander."""
    cfg = world.config
    wander = cfg.lateral_wander if wander is None else wander
    length = world.route.length
    if n_steps is None:
        n_steps = int(np.floor((length - start_s - (0 if world.route.closed else 1.0)) / (cfg.speed * cfg.dt)))
    t = np.arange(n_steps + 1) * cfg.dt
    s = start_s + cfg.speed * t
    # a few random sinusoids in arc length make the lateral offset smooth
    k = 3
    amp = rng.normal(0.0, wander / np.sqrt(k), k)
    wl = rng.uniform(60.0, 200.0, k)
    ph = rng.uniform(0.0, 2 * np.pi, k)
    lat = (amp[None, :] * np.sin(2 * np.pi * s[:, None] / wl[None, :] + ph[None, :])).sum(axis=1)
    dlat = (amp[None, :] * 2 * np.pi / wl[None, :] * np.cos(2 * np.pi * s[:, None] / wl[None, :] + ph[None, :])).sum(axis=1)
    p, tan, nrm = world.route.at(s)
    xy = p + lat[:, None] * nrm
    # heading of the offset path; curvature effects on the offset are second order
    dirv = tan + dlat[:, None] * nrm
    yaw = np.arctan2(dirv[:, 1], dirv[:, 0])
    poses = [Pose.from_state(x, y, cfg.mount_height, yw, 0.0, 0.0) for (x, y), yw in zip(xy, yaw)]
    return Drive(t, poses)
